"""Inner maximisation: universal perturbations under an l2 budget.

``pga_universal`` is the projected gradient ascent used by I-BAU: start at
zero, take ``T`` ascent steps on the batch loss and project back onto the
``C_delta`` ball after each one. Steps are plain gradient steps by default;
``ascent="adam"`` rescales them with Adam moment estimates, which keeps the
step size meaningful when a saturated classifier has vanishing input
gradients. ``naive_universal`` is the baseline
that perturbs one sample at a time and sums the per-sample increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .model import Params
from .objectives import NetObjective

ASCENT_RULES = ("plain", "adam")


@dataclass
class InnerConfig:
    step_size: float = 0.1
    iterations: int = 5
    norm_bound: float = 10.0
    clamp_valid_range: bool = True
    ascent: str = "plain"

    def __post_init__(self):
        if self.step_size <= 0 or self.norm_bound <= 0:
            raise ValueError("step_size and norm_bound must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.ascent not in ASCENT_RULES:
            raise ValueError(f"ascent must be one of {ASCENT_RULES}")


@dataclass
class PerturbResult:
    delta: np.ndarray
    loss_trace: list[float]
    final_norm: float
    initial_loss: float = float("nan")
    norm_trace: list[float] = field(default_factory=list)


def project_l2(delta: np.ndarray, norm_bound: float) -> np.ndarray:
    if norm_bound <= 0:
        raise ValueError("norm_bound must be positive")
    norm = tc.l2_norm(delta)
    if norm <= norm_bound:
        return np.array(delta, dtype=float)
    return delta * (norm_bound / norm)


def _checked(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite inner loss during {where}")
    return value


class _AscentStep:
    def __init__(self, cfg: InnerConfig):
        self.cfg = cfg
        self.t = 0
        self.m = self.v = 0.0

    def __call__(self, g: np.ndarray) -> np.ndarray:
        if self.cfg.ascent == "plain":
            return self.cfg.step_size * g
        b1, b2 = 0.9, 0.999
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return self.cfg.step_size * mhat / (np.sqrt(vhat) + 1e-8)


def ascend(objective, cfg: InnerConfig, delta0: np.ndarray | None = None) -> PerturbResult:
    """Projected gradient ascent on any objective exposing ``evaluate``.

    ``loss_trace[t]`` is the objective after the ``t+1``-th update.
    """
    delta = tc.zeros((objective.dim,)) if delta0 is None else np.array(delta0, dtype=float)
    ev = objective.evaluate(delta, want_delta=True, want_theta=False)
    initial = _checked(ev.loss, "initial evaluation")
    trace, norms = [], []
    stepper = _AscentStep(cfg)
    for t in range(cfg.iterations):
        delta = project_l2(delta + stepper(ev.delta_grad), cfg.norm_bound)
        ev = objective.evaluate(delta, want_delta=True, want_theta=False)
        trace.append(_checked(ev.loss, f"ascent step {t}"))
        norms.append(tc.l2_norm(delta))
    return PerturbResult(delta, trace, tc.l2_norm(delta), initial, norms)


def pga_universal(params: Params, x: np.ndarray, y, cfg: InnerConfig) -> PerturbResult:
    return ascend(NetObjective(params, x, y, cfg.clamp_valid_range), cfg)


def naive_universal(
    params: Params,
    x: np.ndarray,
    y,
    cfg: InnerConfig,
    per_sample_steps: int,
    delta0: np.ndarray | None = None,
) -> PerturbResult:
    """One pass over the batch, summing per-sample ascent increments.

    For each row in order, ``per_sample_steps`` ascent steps are taken on that
    row's own loss starting from the current universal delta; the increment
    is added to delta, which is then projected. ``loss_trace`` holds the
    row's loss after its steps.
    """
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    y = np.asarray(y, dtype=np.int64)
    delta = tc.zeros((x.shape[1],)) if delta0 is None else np.array(delta0, dtype=float)
    initial = _checked(NetObjective(params, x, y, cfg.clamp_valid_range).value(delta), "initial evaluation")
    trace, norms = [], []
    for i in range(x.shape[0]):
        obj = NetObjective(params, x[i:i + 1], y[i:i + 1], cfg.clamp_valid_range)
        local = delta.copy()
        loss = None
        stepper = _AscentStep(cfg)
        for _ in range(per_sample_steps):
            ev = obj.evaluate(local, want_delta=True, want_theta=False)
            _checked(ev.loss, f"sample {i}")
            local = local + stepper(ev.delta_grad)
        if per_sample_steps > 0:
            loss = obj.value(local)
            delta = project_l2(delta + (local - delta), cfg.norm_bound)
        trace.append(_checked(loss if loss is not None else obj.value(delta), f"sample {i}"))
        norms.append(tc.l2_norm(delta))
    return PerturbResult(delta, trace, tc.l2_norm(delta), initial, norms)
