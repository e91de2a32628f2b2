"""Experiment plumbing shared by the CLI, the scripts and the acceptance suite.

Everything here is driven by a ``RunConfig``; functions are deterministic
given the seeds in that config.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .config import RunConfig
from .evalmetrics import (
    MetricsReport,
    StabilityStats,
    attack_report,
    empirical_margin_risk,
    error_gap,
    stability_stats,
)
from .hypergrad import LinSolveConfig, implicit_hypergrad, inner_error_curve
from .inner_max import InnerConfig
from .model import MlpSpec, Params, TrainConfig, train
from .objectives import QuadraticBilevel
from .poison import (
    Dataset,
    PoisonEntry,
    PoisonPlan,
    TriggerSpec,
    load_idx,
    make_synthetic_blobs,
    poison_dataset,
    split,
    trigger_l2_norm,
)
from .unlearn import RoundRecord, UnlearnConfig, ibau, naive_unlearn, sweep_norm_bound

SWEEP_AXES = ("norm_bound", "poison_ratio", "clean_size", "seed")


# -- building blocks ---------------------------------------------------------


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """``(train, clean defense set, test)`` per ``data.fractions``."""
    if cfg["data.source"] == "blobs":
        data = make_synthetic_blobs(cfg["data.classes"], cfg["data.dim"], cfg["data.per_class"],
                                    cfg["data.spread"], tc.make_rng(cfg["data.seed"]))
    else:
        if not cfg["data.idx_images"] or not cfg["data.idx_labels"]:
            raise ValueError("data.source = idx needs data.idx_images and data.idx_labels")
        data = load_idx(cfg["data.idx_images"], cfg["data.idx_labels"], cfg["data.downsample"] or None,
                        cfg["data.classes"])
    train_set, clean, test = split(data, cfg["data.fractions"], cfg["data.seed"])
    return train_set, clean, test


def build_trigger(cfg: RunConfig, d: int, index: int = 0) -> TriggerSpec:
    """Trigger ``index`` covers ``attack.dims`` shifted down by ``index`` block widths."""
    dims = np.asarray(cfg["attack.dims"], dtype=np.int64) - index * len(cfg["attack.dims"])
    if dims.min() < 0 or dims.max() >= d:
        raise ValueError(f"trigger {index} dims {dims.tolist()} fall outside [0, {d})")
    mask = np.zeros(d)
    pattern = np.zeros(d)
    mask[dims] = 1.0
    pattern[dims] = cfg["attack.values"]
    return TriggerSpec(cfg["attack.kind"], mask, pattern, cfg["attack.blend_alpha"])


def build_plan(cfg: RunConfig, d: int) -> PoisonPlan:
    mode, targets = cfg["attack.mode"], cfg["attack.targets"]
    if not targets:
        raise ValueError("attack.targets must list at least one label")
    if mode == "multi_trigger":
        entries = [PoisonEntry(build_trigger(cfg, d, k), t) for k, t in enumerate(targets)]
    else:
        entries = [PoisonEntry(build_trigger(cfg, d), targets[0])]
    return PoisonPlan(mode, entries, cfg["attack.ratio"], cfg["attack.seed"])


def model_spec(cfg: RunConfig, d: int, C: int) -> MlpSpec:
    return MlpSpec((d, *cfg["train.hidden"], C), cfg["train.activation"])


def train_config(cfg: RunConfig) -> TrainConfig:
    s = cfg.section("train")
    return TrainConfig(s["lr"], s["epochs"], s["batch_size"], s["optimizer"], s["seed"])


def unlearn_config(cfg: RunConfig) -> UnlearnConfig:
    s = cfg.section("unlearn")
    return UnlearnConfig(
        rounds=s["rounds"],
        inner=InnerConfig(s["inner_lr"], s["inner_steps"], s["norm_bound"], s["clamp"], s["ascent"]),
        linsolve=LinSolveConfig(s["solver"], s["solver_rounds"], s["fp_step"], s["tol"], s["fallback"]),
        outer_lr=s["outer_lr"],
        optimizer=s["optimizer"],
        batch_size=s["batch_size"],
        seed=s["seed"],
        naive_steps=s["naive_steps"],
    )


def defense_subset(clean: Dataset, size: int, seed: int) -> Dataset:
    """All of ``clean`` for ``size = 0``, else a seeded random subset."""
    if size < 0:
        raise ValueError("clean_size must be >= 0")
    if size == 0 or size >= len(clean):
        return clean
    idx = np.sort(tc.make_rng(seed).permutation(len(clean))[:size])
    return clean.subset(idx)


def eval_hook(test: Dataset, plan: PoisonPlan):
    """Per-round ACC and ASR; the only place attack knowledge enters unlearning."""

    def hook(params: Params, _round: int) -> dict:
        rep = attack_report(params, test, plan)
        return {"acc": rep.acc, "asr": rep.asr_overall, "asr_per_entry": [e[2] for e in rep.asr_per_entry]}

    return hook


def full_report(params: Params, train_set: Dataset, test: Dataset, plan: PoisonPlan, gamma: float) -> MetricsReport:
    rep = attack_report(params, test, plan)
    rep.margin_risk = (gamma, empirical_margin_risk(params, test, None, gamma))
    rep.error_gap = error_gap(params, train_set, test)
    return rep


def time_to_effective(records: Sequence[RoundRecord], threshold: float) -> float | None:
    """Cumulative wall time until every per-trigger ASR first drops below ``threshold``."""
    elapsed = 0.0
    for r in records:
        elapsed += r.wall_time
        per = r.eval.get("asr_per_entry")
        if per is not None and max(per) < threshold:
            return elapsed
    return None


# -- whole experiments -------------------------------------------------------


@dataclass
class PoisonedModel:
    cfg: RunConfig
    train_set: Dataset
    clean: Dataset
    test: Dataset
    plan: PoisonPlan
    params: Params
    train_history: list[float]
    before: MetricsReport


def prepare_poisoned(cfg: RunConfig) -> PoisonedModel:
    train_set, clean, test = build_data(cfg)
    plan = build_plan(cfg, train_set.dim)
    poisoned, _ = poison_dataset(train_set, plan)
    params, hist = train(poisoned, model_spec(cfg, train_set.dim, train_set.num_classes), train_config(cfg))
    before = full_report(params, train_set, test, plan, cfg["eval.gamma"])
    return PoisonedModel(cfg, train_set, clean, test, plan, params, hist, before)


@dataclass
class ExperimentResult:
    method: str
    before: MetricsReport
    after: MetricsReport
    records: list[RoundRecord]
    params: Params
    poisoned_params: Params
    trigger_norm: float
    unlearn_seconds: float
    time_to_effective: float | None
    extra: dict = field(default_factory=dict)

    def best_asr(self) -> float:
        """Lowest worst-trigger ASR over the recorded rounds."""
        return min(max(r.eval["asr_per_entry"]) for r in self.records) if self.records else max(
            e[2] for e in self.before.asr_per_entry)

    def first_round_below(self, threshold: float) -> int | None:
        """1-based index of the first round whose worst-trigger ASR is <= threshold."""
        for r in self.records:
            if max(r.eval["asr_per_entry"]) <= threshold:
                return r.round + 1
        return None


def unlearn_poisoned(pm: PoisonedModel, cfg: RunConfig | None = None) -> ExperimentResult:
    cfg = cfg or pm.cfg
    ucfg = unlearn_config(cfg)
    clean = defense_subset(pm.clean, cfg["unlearn.clean_size"], cfg["unlearn.seed"])
    method = ibau if cfg["unlearn.method"] == "ibau" else naive_unlearn
    start = time.perf_counter()
    params, records = method(pm.params, clean, ucfg, eval_hook(pm.test, pm.plan))
    seconds = time.perf_counter() - start
    after = full_report(params, pm.train_set, pm.test, pm.plan, cfg["eval.gamma"])
    return ExperimentResult(
        cfg["unlearn.method"], pm.before, after, records, params, pm.params,
        trigger_l2_norm(pm.plan.entries[0].trigger), seconds,
        time_to_effective(records, cfg["eval.asr_threshold"]),
    )


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """Data, poisoning, training and unlearning for one configuration."""
    return unlearn_poisoned(prepare_poisoned(cfg), cfg)


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepResult:
    axis: str
    columns: list[str]
    rows: list[list]
    stats: dict[str, StabilityStats] = field(default_factory=dict)


def default_sweep_values(cfg: RunConfig, axis: str) -> list[float]:
    if cfg["eval.sweep_values"]:
        return list(cfg["eval.sweep_values"])
    if axis == "norm_bound":
        tau = trigger_l2_norm(build_trigger(cfg, cfg["data.dim"]))
        return [0.25 * tau, tau, 4.0 * tau]
    if axis == "poison_ratio":
        return [0.05, 0.1, 0.2]
    if axis == "clean_size":
        return [100, 500, 0]
    return list(range(cfg["eval.seeds"]))


def _summary_row(value, res: ExperimentResult) -> list:
    return [value, res.before.acc, res.before.asr_overall, res.after.acc, res.after.asr_overall,
            max(e[2] for e in res.after.asr_per_entry)]


SWEEP_COLUMNS = ["value", "acc_before", "asr_before", "acc_after", "asr_after", "asr_after_max"]


def sweep(cfg: RunConfig, axis: str, values: Sequence[float] | None = None) -> SweepResult:
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = list(values) if values is not None else default_sweep_values(cfg, axis)
    rows = []
    if axis == "norm_bound":
        pm = prepare_poisoned(cfg)
        ucfg = unlearn_config(cfg)
        clean = defense_subset(pm.clean, cfg["unlearn.clean_size"], cfg["unlearn.seed"])

        def evaluate(p):
            rep = attack_report(p, pm.test, pm.plan)
            return rep.acc, rep.asr_overall

        for bound, acc, asr in sweep_norm_bound(pm.params, clean, values, ucfg, evaluate):
            rows.append([bound, pm.before.acc, pm.before.asr_overall, acc, asr, asr])
        return SweepResult(axis, SWEEP_COLUMNS, rows)
    if axis == "clean_size":
        pm = prepare_poisoned(cfg)
        # "all" (0) sorts last
        for size in sorted((int(v) for v in values), key=lambda s: (s == 0, s)):
            res = unlearn_poisoned(pm, cfg.with_values(unlearn__clean_size=size))
            rows.append(_summary_row(size, res))
        return SweepResult(axis, SWEEP_COLUMNS, rows)
    if axis == "poison_ratio":
        for ratio in sorted(float(v) for v in values):
            rows.append(_summary_row(ratio, run_experiment(cfg.with_values(attack__ratio=ratio))))
        return SweepResult(axis, SWEEP_COLUMNS, rows)
    for seed in sorted(int(v) for v in values):
        rows.append(_summary_row(seed, run_experiment(cfg.with_seed(seed))))
    stats = {name: stability_stats([r[i] for r in rows]) for i, name in enumerate(SWEEP_COLUMNS) if i > 0}
    return SweepResult(axis, SWEEP_COLUMNS, rows, stats)


def with_method(cfg: RunConfig, method: str) -> RunConfig:
    return cfg.with_values(unlearn__method=method)


__all__ = [
    "ExperimentResult", "PoisonedModel", "SweepResult", "build_data", "build_plan", "build_trigger",
    "defense_subset", "eval_hook", "full_report", "model_spec", "prepare_poisoned", "run_experiment",
    "sweep", "train_config", "unlearn_config", "unlearn_poisoned", "with_method",
]


# -- quadratic oracle self-check ---------------------------------------------

CURVE_STEPS = (0, 1, 3, 5, 10, 50)


@dataclass
class OracleCheck:
    analytic: bool
    threshold: float
    linear_errors: list[float]
    quadratic_errors: list[float]
    residuals: list[float]
    curve: list[tuple[int, float]]

    @property
    def max_error(self) -> float:
        return max(self.linear_errors + self.quadratic_errors)

    @property
    def curve_monotone(self) -> bool:
        tail = [e for t, e in self.curve if t >= 3]
        return all(b <= a for a, b in zip(tail, tail[1:]))

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold and max(self.residuals) <= 1e-10 and self.curve_monotone


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def oracle_check(seed: int = 0, analytic: bool = False, instances: int = 10, max_dim: int = 16) -> OracleCheck:
    """Implicit hypergradients against closed forms on random quadratic problems.

    Linear coupling: 10 suboptimal deltas, answer ``theta``. SPD instances:
    dims cycle up to ``max_dim``, CG with ``rounds = d``. The error curve uses
    a two-round solver so that the inner error dominates.
    """
    rng = tc.make_rng(seed)
    lin = QuadraticBilevel.linear_coupling(8)
    lin_err = []
    for _ in range(instances):
        theta = rng.standard_normal(8)
        rep = implicit_hypergrad(lin.at(theta), 3.0 * rng.standard_normal(8), LinSolveConfig(), analytic)
        lin_err.append(_rel(rep.hypergrad[0], theta))
    quad_err, residuals = [], []
    for i in range(instances):
        d = 2 + (i * 7) % (max_dim - 1)
        o = QuadraticBilevel.random(d, 5, rng)
        theta, delta = rng.standard_normal(5), rng.standard_normal(d)
        rep = implicit_hypergrad(o.at(theta), delta, LinSolveConfig(rounds=d, tol=0.0), analytic)
        quad_err.append(_rel(rep.hypergrad[0], o.hypergrad_closed_form(delta, theta)))
        residuals.append(rep.linear_residual_norm)
    o = QuadraticBilevel.random(8, 4, rng, cond=5.0)
    curve = inner_error_curve(o, rng.standard_normal(4), CURVE_STEPS, LinSolveConfig(rounds=2), analytic=analytic)
    return OracleCheck(analytic, 1e-8 if analytic else 1e-4, lin_err, quad_err, residuals, curve)
