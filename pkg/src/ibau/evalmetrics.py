"""Clean accuracy, attack success rates, margin risk and run-to-run statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import Params, forward, predict
from .poison import Dataset, PoisonPlan, TriggerSpec, apply_trigger


@dataclass
class MetricsReport:
    acc: float
    asr_overall: float
    asr_per_entry: list[tuple[int, int, float]] = field(default_factory=list)
    margin_risk: tuple[float, float] | None = None
    error_gap: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class StabilityStats:
    mean: float
    std: float
    min: float
    max: float


def accuracy(params: Params, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    return float(np.mean(predict(params, dataset.x) == dataset.y))


def asr_single_target(params: Params, clean_test: Dataset, trigger: TriggerSpec, target: int) -> float:
    """Share of non-target test rows that the triggered model sends to ``target``."""
    keep = clean_test.y != target
    if not np.any(keep):
        raise ValueError("no non-target rows to attack")
    pred = predict(params, apply_trigger(clean_test.x[keep], trigger))
    return float(np.mean(pred == target))


def asr_all_to_all(params: Params, clean_test: Dataset, trigger: TriggerSpec) -> float:
    if len(clean_test) == 0:
        raise ValueError("dataset must be nonempty")
    pred = predict(params, apply_trigger(clean_test.x, trigger))
    return float(np.mean(pred == (clean_test.y + 1) % clean_test.num_classes))


def ramp_loss(r, gamma: float):
    """0 below ``-gamma``, ``1 + r/gamma`` on ``[-gamma, 0]``, 1 above 0."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    r = np.asarray(r, dtype=float)
    out = np.where(r < -gamma, 0.0, np.where(r > 0, 1.0, 1.0 + r / gamma))
    return float(out) if out.ndim == 0 else out


def margins(logits: np.ndarray, y) -> np.ndarray:
    """``v_y - max_{j != y} v_j`` per row."""
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    own = logits[rows, y]
    others = logits.copy()
    others[rows, y] = -np.inf
    return own - others.max(axis=1)


def empirical_margin_risk(params: Params, dataset: Dataset, delta, gamma: float) -> float:
    x = dataset.x if delta is None else dataset.x + np.asarray(delta, dtype=float)[None, :]
    m = margins(forward(params, x), dataset.y)
    return float(np.mean(ramp_loss(-m, gamma)))


def error_gap(params: Params, train_set: Dataset, test_set: Dataset) -> float:
    return abs((1.0 - accuracy(params, test_set)) - (1.0 - accuracy(params, train_set)))


def stability_stats(values: Sequence[float]) -> StabilityStats:
    """Population statistics over runs."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("need at least one run")
    return StabilityStats(float(v.mean()), float(v.std()), float(v.min()), float(v.max()))


def attack_report(params: Params, clean_test: Dataset, plan: PoisonPlan) -> MetricsReport:
    """ACC plus ASR for every trigger in ``plan``; overall ASR is the mean."""
    acc = accuracy(params, clean_test)
    per = []
    for i, e in enumerate(plan.entries):
        if plan.mode == "all_to_all":
            per.append((i, -1, asr_all_to_all(params, clean_test, e.trigger)))
        else:
            per.append((i, e.target, asr_single_target(params, clean_test, e.trigger, e.target)))
    return MetricsReport(acc, float(np.mean([p[2] for p in per])), per)
