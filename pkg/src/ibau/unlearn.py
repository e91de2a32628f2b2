"""Outer unlearning loops: I-BAU and the naive universal-perturbation baseline.

Both take only the poisoned parameters and a clean dataset. Anything that
needs attack knowledge (ASR evaluation) goes through the optional
``eval_hook(params, round_index) -> dict``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import tensor_core as tc
from .hypergrad import LinSolveConfig, implicit_hypergrad
from .inner_max import InnerConfig, ascend, naive_universal, pga_universal
from .model import Params, make_optimizer
from .objectives import NetObjective, QuadraticBilevel
from .poison import Dataset

EvalHook = Callable[[Params, int], dict]


@dataclass
class UnlearnConfig:
    rounds: int = 5
    inner: InnerConfig = field(default_factory=InnerConfig)
    linsolve: LinSolveConfig = field(default_factory=LinSolveConfig)
    outer_lr: float = 0.1
    optimizer: str = "sgd"
    batch_size: int = 0
    seed: int = 0
    naive_steps: int = 1

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.outer_lr <= 0:
            raise ValueError("outer_lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 = full batch)")


@dataclass
class RoundRecord:
    round: int
    delta_norm: float
    h_before: float
    h_after: float
    direct_norm: float
    indirect_norm: float
    residual_norm: float
    fallback_used: bool
    wall_time: float
    eval: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def clean_batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Full batch forever, or consecutive slices of seeded permutations."""
    if batch_size == 0 or batch_size >= n:
        rows = np.arange(n)
        while True:
            yield rows
    rng = tc.make_rng(seed)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield np.sort(order[start:start + batch_size])


def _run(params, clean_set, cfg, eval_hook, round_fn):
    if len(clean_set) == 0:
        raise ValueError("clean set must be nonempty")
    if clean_set.dim != params.spec.input_dim:
        raise ValueError("clean set dimension does not match the model")
    opt = make_optimizer(cfg.optimizer, cfg.outer_lr)
    batches = clean_batches(len(clean_set), cfg.batch_size, cfg.seed)
    records = []
    for i in range(cfg.rounds):
        idx = next(batches)
        x, y = clean_set.x[idx], clean_set.y[idx]
        start = time.perf_counter()
        try:
            grads, rec = round_fn(params, x, y)
        except FloatingPointError as exc:
            raise FloatingPointError(f"round {i}: {exc}") from exc
        params = params.replace(opt.step(params.values(), grads))
        # perf_counter can tick coarsely; keep the recorded time strictly positive
        rec.wall_time = max(time.perf_counter() - start, 1e-9)
        rec.round = i
        if eval_hook is not None:
            rec.eval = dict(eval_hook(params, i))
        records.append(rec)
    return params, records


def ibau(params: Params, clean_set: Dataset, cfg: UnlearnConfig, eval_hook: EvalHook | None = None):
    """I-BAU: per round, zero-initialised PGA for delta, then an outer step
    along the implicit hypergradient computed on the same clean batch."""

    def round_fn(p, x, y):
        pert = pga_universal(p, x, y, cfg.inner)
        rep = implicit_hypergrad(NetObjective(p, x, y, cfg.inner.clamp_valid_range), pert.delta, cfg.linsolve)
        rec = RoundRecord(0, pert.final_norm, pert.initial_loss, pert.loss_trace[-1], rep.direct_norm,
                          rep.indirect_norm, rep.linear_residual_norm, rep.fallback_used, 0.0)
        return rep.hypergrad, rec

    return _run(params, clean_set, cfg, eval_hook, round_fn)


def naive_unlearn(params: Params, clean_set: Dataset, cfg: UnlearnConfig, eval_hook: EvalHook | None = None):
    """Adversarial training with a summed per-sample universal perturbation,
    treating delta as a constant in the outer step."""

    def round_fn(p, x, y):
        pert = naive_universal(p, x, y, cfg.inner, cfg.naive_steps)
        ev = NetObjective(p, x, y, cfg.inner.clamp_valid_range).evaluate(pert.delta, want_delta=False)
        norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in ev.param_grads)))
        rec = RoundRecord(0, pert.final_norm, pert.initial_loss, ev.loss, norm, 0.0, 0.0, False, 0.0)
        return ev.param_grads, rec

    return _run(params, clean_set, cfg, eval_hook, round_fn)


def sweep_norm_bound(
    params: Params,
    clean_set: Dataset,
    bounds,
    cfg: UnlearnConfig,
    evaluate: Callable[[Params], tuple[float, float]],
) -> list[tuple[float, float, float]]:
    """One I-BAU run per norm bound; rows ``(C_delta, acc, asr)``, ascending."""
    rows = []
    for bound in sorted(float(b) for b in bounds):
        if bound <= 0:
            raise ValueError("norm bounds must be positive")
        run_cfg = replace(cfg, inner=replace(cfg.inner, norm_bound=bound))
        out, _ = ibau(params, clean_set, run_cfg)
        acc, asr = evaluate(out)
        rows.append((bound, float(acc), float(asr)))
    return rows


def ibau_oracle(oracle: QuadraticBilevel, theta0, cfg: UnlearnConfig, analytic: bool = True):
    """I-BAU on the quadratic test problem; returns ``(theta, psi per step)``.

    ``psi`` is listed for the starting point and after every outer step.
    """
    theta = np.array(theta0, dtype=float)
    opt = make_optimizer(cfg.optimizer, cfg.outer_lr)
    psis = [oracle.psi(theta)]
    for _ in range(cfg.rounds):
        obj = oracle.at(theta)
        delta = ascend(obj, cfg.inner).delta
        rep = implicit_hypergrad(obj, delta, cfg.linsolve, analytic)
        (theta,) = opt.step([theta], rep.hypergrad)
        psis.append(oracle.psi(theta))
    return theta, psis
