"""Flat ``key = value`` run configuration with namespaced keys.

Files are INI-like: one assignment per line, ``#`` starts a comment, blank
lines are ignored and optional ``[section]`` headers prefix the keys that
follow them. Every key must be one of ``DEFAULTS``; values are parsed into
the type of the default. ``--set key=value`` overrides use the same parser.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable

NAMESPACES = ("data", "attack", "train", "unlearn", "eval")


class ConfigError(ValueError):
    """Bad config file, unknown key or unparsable value."""


class IntList(tuple):
    pass


class FloatList(tuple):
    pass


# Desk-scale preset: 4-class blobs in 64 dims, a two-pixel patch trigger and
# the unlearning settings that remove it in a handful of rounds.
DEFAULTS: dict[str, Any] = {
    "data.source": "blobs",
    "data.classes": 4,
    "data.dim": 64,
    "data.per_class": 500,
    "data.spread": 0.05,
    "data.fractions": FloatList((0.6, 0.2, 0.2)),
    "data.seed": 0,
    "data.idx_images": "",
    "data.idx_labels": "",
    "data.downsample": 8,
    "attack.mode": "single_target",
    "attack.kind": "patch",
    "attack.dims": IntList((62, 63)),
    "attack.values": FloatList((1.0, 1.0)),
    "attack.blend_alpha": 0.2,
    "attack.targets": IntList((0,)),
    "attack.ratio": 0.2,
    "attack.seed": 0,
    "train.hidden": IntList((64, 32)),
    "train.activation": "relu",
    "train.lr": 0.01,
    "train.epochs": 50,
    "train.batch_size": 32,
    "train.optimizer": "adam",
    "train.seed": 0,
    "unlearn.method": "ibau",
    "unlearn.rounds": 5,
    "unlearn.inner_steps": 10,
    "unlearn.inner_lr": 0.1,
    "unlearn.ascent": "adam",
    "unlearn.norm_bound": 1.5,
    "unlearn.clamp": True,
    "unlearn.solver": "fixed_point",
    "unlearn.solver_rounds": 5,
    "unlearn.fp_step": 0.01,
    "unlearn.tol": 1e-12,
    "unlearn.fallback": True,
    "unlearn.outer_lr": 0.01,
    "unlearn.optimizer": "adam",
    "unlearn.batch_size": 0,
    "unlearn.clean_size": 0,
    "unlearn.naive_steps": 1,
    "unlearn.seed": 0,
    "eval.gamma": 1.0,
    "eval.asr_threshold": 0.2,
    "eval.sweep_values": FloatList(()),
    "eval.seeds": 10,
}

SEED_KEYS = ("data.seed", "attack.seed", "train.seed", "unlearn.seed")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text: str, kind):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(kind(p) for p in parts)


def parse_value(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, IntList):
            return IntList(_parse_list(text, int))
        if isinstance(default, FloatList):
            return FloatList(_parse_list(text, float))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


class RunConfig(dict):
    """A fully resolved ``key -> typed value`` map."""

    def section(self, ns: str) -> dict[str, Any]:
        prefix = ns + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def with_overrides(self, assignments: Iterable[str]) -> "RunConfig":
        out = RunConfig(self)
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            key = key.strip()
            out[key] = parse_value(key, text)
        out.validate()
        return out

    def with_values(self, **values) -> "RunConfig":
        """Programmatic overrides; ``data__seed=3`` sets ``data.seed``."""
        out = RunConfig(self)
        for name, value in values.items():
            key = name.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = value
        out.validate()
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        out = RunConfig(self)
        for key in SEED_KEYS:
            out[key] = int(seed)
        return out

    def validate(self) -> None:
        fr = self["data.fractions"]
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"data.fractions must be three non-negative numbers summing to 1, got {list(fr)}")
        if len(self["attack.dims"]) != len(self["attack.values"]) or not self["attack.dims"]:
            raise ConfigError("attack.dims and attack.values must be nonempty and of equal length")
        if not 0.0 <= self["attack.ratio"] <= 1.0:
            raise ConfigError("attack.ratio must lie in [0, 1]")
        choices = {
            "data.source": ("blobs", "idx"),
            "attack.mode": ("single_target", "all_to_all", "multi_trigger"),
            "attack.kind": ("patch", "blend", "noise"),
            "train.activation": ("relu", "sigmoid"),
            "train.optimizer": ("sgd", "adam"),
            "unlearn.method": ("ibau", "naive"),
            "unlearn.ascent": ("plain", "adam"),
            "unlearn.solver": ("conjugate_gradient", "fixed_point"),
            "unlearn.optimizer": ("sgd", "adam"),
        }
        for key, allowed in choices.items():
            if self[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {self[key]!r}")

    def dumps(self) -> str:
        lines = ["# resolved run configuration"]
        current = None
        for key in DEFAULTS:
            ns, name = key.split(".", 1)
            if ns != current:
                lines += ["", f"[{ns}]"]
                current = ns
            lines.append(f"{name} = {format_value(self[key])}")
        return "\n".join(lines) + "\n"


def default_config() -> RunConfig:
    cfg = RunConfig(DEFAULTS)
    cfg.validate()
    return cfg


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig(DEFAULTS)
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in NAMESPACES:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        try:
            cfg[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_text(path.read_text(encoding="utf-8"), str(path))
