"""On-disk formats: binary checkpoints, trigger files and results.

Checkpoint layout (all integers little-endian)::

    b"IBAU" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | u64 dim * rank | float64 LE data (row-major)

The activation is not stored; it is supplied when loading.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MlpSpec, Params
from .poison import PoisonEntry, PoisonPlan, TriggerSpec

CHECKPOINT_MAGIC = b"IBAU"
CHECKPOINT_VERSION = 1
RESULTS_VERSION = 1

ROUND_COLUMNS = (
    "round", "delta_norm", "h_before", "h_after", "direct_norm", "indirect_norm",
    "residual_norm", "fallback_used", "wall_time", "acc", "asr",
)


class FormatError(ValueError):
    """Malformed checkpoint, trigger or results file."""


# -- checkpoints -------------------------------------------------------------


def checkpoint_bytes(params: Params) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors)))
    for name, arr in params:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(params: Params, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def _spec_from_tensors(tensors: dict[str, np.ndarray], activation: str) -> MlpSpec:
    n = len(tensors) // 2
    try:
        dims = [tensors["W0"].shape[0]] + [tensors[f"W{i}"].shape[1] for i in range(n)]
    except (KeyError, IndexError):
        raise FormatError("checkpoint tensors are not an MLP (W0, b0, W1, ...)") from None
    return MlpSpec(tuple(dims), activation)


def params_from_bytes(raw: bytes, activation: str = "relu", source: str = "<bytes>") -> Params:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: tensor name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor {name!r}")
        tensors[name] = data
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes")
    try:
        return Params(_spec_from_tensors(tensors, activation), tensors)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None


def load_checkpoint(path, activation: str = "relu") -> Params:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return params_from_bytes(path.read_bytes(), activation, str(path))


# -- trigger files -----------------------------------------------------------


def _floats(values) -> str:
    return ",".join(format(float(v), ".17g") for v in values)


def plan_text(plan: PoisonPlan) -> str:
    lines = [
        "# backdoor trigger file",
        f"mode = {plan.mode}",
        f"poison_ratio = {plan.poison_ratio!r}",
        f"seed = {plan.seed}",
        f"entries = {len(plan.entries)}",
    ]
    for i, e in enumerate(plan.entries):
        t = e.trigger
        lines += [
            f"entry{i}.kind = {t.kind}",
            f"entry{i}.target = {e.target}",
            f"entry{i}.blend_alpha = {format(float(t.blend_alpha), '.17g')}",
            f"entry{i}.mask = {_floats(t.mask)}",
            f"entry{i}.pattern = {_floats(t.pattern)}",
        ]
    return "\n".join(lines) + "\n"


def save_plan(plan: PoisonPlan, path) -> None:
    Path(path).write_text(plan_text(plan), encoding="utf-8")


def parse_plan(text: str, source: str = "<trigger>") -> PoisonPlan:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        fields[k] = v
    try:
        entries = []
        for i in range(int(fields["entries"])):
            trig = TriggerSpec(
                fields[f"entry{i}.kind"],
                np.array([float(x) for x in fields[f"entry{i}.mask"].split(",")]),
                np.array([float(x) for x in fields[f"entry{i}.pattern"].split(",")]),
                float(fields[f"entry{i}.blend_alpha"]),
            )
            entries.append(PoisonEntry(trig, int(fields[f"entry{i}.target"])))
        return PoisonPlan(fields["mode"], entries, float(fields["poison_ratio"]), int(fields["seed"]))
    except KeyError as exc:
        raise FormatError(f"{source}: missing field {exc.args[0]}") from None
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None


def load_plan(path) -> PoisonPlan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trigger file {path} not found")
    return parse_plan(path.read_text(encoding="utf-8"), str(path))


# -- results -----------------------------------------------------------------


def round_columns(num_entries: int) -> list[str]:
    return list(ROUND_COLUMNS) + [f"asr_{i}" for i in range(num_entries)]


def round_rows(records: Sequence[dict], num_entries: int) -> list[list]:
    rows = []
    for r in records:
        ev = r.get("eval") or {}
        per = list(ev.get("asr_per_entry", []))
        per += [float("nan")] * (num_entries - len(per))
        rows.append([
            r["round"], r["delta_norm"], r["h_before"], r["h_after"], r["direct_norm"], r["indirect_norm"],
            r["residual_norm"], int(bool(r["fallback_used"])), r["wall_time"],
            ev.get("acc", float("nan")), ev.get("asr", float("nan")),
        ] + per)
    return rows


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, payload: dict) -> None:
    doc = {"format_version": RESULTS_VERSION, **payload}
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
