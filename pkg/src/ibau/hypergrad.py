"""Implicit hypergradients for ``psi(theta) = H(delta(theta), theta)``.

With ``g1 = grad_delta H`` and ``M = -grad_delta^2 H`` (positive definite near
an inner maximum), the implicit function theorem gives

    grad psi = grad_theta H + (d delta / d theta)^T g1
             = grad_theta H - (d^2 H / d theta d delta) (grad_delta^2 H)^{-1} g1
             = grad_theta H + (d^2 H / d theta d delta) v,     with  M v = g1.

``M v = g1`` is solved approximately by a few rounds of conjugate gradient
or a fixed-point iteration. Both second-order products are central finite
differences of first-order gradients taken along a unit direction with step
``1e-4 * (1 + |delta|_inf)``. Objectives that provide ``analytic_hvp`` /
``analytic_cross`` can be run exactly instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .inner_max import InnerConfig, ascend
from .objectives import QuadraticBilevel

SOLVERS = ("conjugate_gradient", "fixed_point")


@dataclass
class LinSolveConfig:
    method: str = "conjugate_gradient"
    rounds: int = 5
    fp_step: float = 0.1
    tol: float = 1e-12
    fallback_on_divergence: bool = True

    def __post_init__(self):
        if self.method not in SOLVERS:
            raise ValueError(f"method must be one of {SOLVERS}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.fp_step <= 0:
            raise ValueError("fp_step must be positive")


def fd_step(delta: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(delta))))


def _unit(v):
    norm = tc.l2_norm(v)
    return norm, (v / norm if norm > 0 else v)


def hvp_delta(objective, delta, v, analytic: bool = False) -> np.ndarray:
    """``grad_delta^2 H(delta) @ v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (objective.dim,):
        raise ValueError(f"v must have length {objective.dim}")
    norm, u = _unit(v)
    if norm == 0:
        return np.zeros_like(v)
    if analytic:
        return objective.analytic_hvp(delta, v)
    eps = fd_step(delta)
    gp = objective.evaluate(delta + eps * u, want_theta=False).delta_grad
    gm = objective.evaluate(delta - eps * u, want_theta=False).delta_grad
    return (gp - gm) * (norm / (2 * eps))


def cross_vp(objective, delta, v, analytic: bool = False) -> list[np.ndarray]:
    """``(d^2 H / d theta d delta) @ v``, shaped like the theta gradient."""
    v = np.asarray(v, dtype=float)
    norm, u = _unit(v)
    if norm == 0:
        return [np.zeros_like(g) for g in objective.evaluate(delta, want_delta=False).param_grads]
    if analytic:
        return objective.analytic_cross(delta, v)
    eps = fd_step(delta)
    gp = objective.evaluate(delta + eps * u, want_delta=False).param_grads
    gm = objective.evaluate(delta - eps * u, want_delta=False).param_grads
    return [(a - b) * (norm / (2 * eps)) for a, b in zip(gp, gm)]


class HvpOperator:
    """``v -> M v`` with ``M = -grad_delta^2 H`` frozen at ``delta``."""

    def __init__(self, objective, delta, analytic: bool = False):
        self.objective = objective
        self.delta = np.asarray(delta, dtype=float)
        self.analytic = analytic
        self.calls = 0

    @property
    def step_rule(self) -> str:
        return "analytic" if self.analytic else f"central FD, eps={fd_step(self.delta):.3g}"

    def __call__(self, v) -> np.ndarray:
        self.calls += 1
        return -hvp_delta(self.objective, self.delta, v, self.analytic)


def solve_linear(apply_m: Callable[[np.ndarray], np.ndarray], rhs, cfg: LinSolveConfig):
    """Approximately solve ``M v = rhs`` from ``v0 = 0``.

    Returns ``(v, residual_norm, diverged, rounds_used)`` where the residual is
    recomputed as ``|M v - rhs|``. Divergence means the residual grew more than
    10x over its initial value; CG also stops, flagged as diverged, on
    non-positive curvature, where ``M`` is not positive definite along ``p``.
    """
    rhs = np.asarray(rhs, dtype=float)
    v = np.zeros_like(rhs)
    r0 = tc.l2_norm(rhs)
    if r0 == 0:
        return v, 0.0, False, 0
    diverged = False
    used = 0
    if cfg.method == "conjugate_gradient":
        r = rhs.copy()
        p = r.copy()
        rr = r @ r
        for _ in range(cfg.rounds):
            mp = apply_m(p)
            curv = p @ mp
            used += 1
            if not np.isfinite(curv) or curv <= 0:
                diverged = True
                break
            a = rr / curv
            v = v + a * p
            r = r - a * mp
            rr_new = r @ r
            if np.sqrt(rr_new) > 10 * r0:
                diverged = True
                break
            if np.sqrt(rr_new) <= cfg.tol:
                break
            p = r + (rr_new / rr) * p
            rr = rr_new
    else:
        res = -rhs
        for _ in range(cfg.rounds):
            v = v - cfg.fp_step * res
            used += 1
            res = apply_m(v) - rhs
            rn = tc.l2_norm(res)
            if not np.isfinite(rn) or rn > 10 * r0:
                diverged = True
                break
            if rn <= cfg.tol:
                break
    residual = tc.l2_norm(apply_m(v) - rhs)
    if not np.isfinite(residual) or residual > 10 * r0:
        diverged = True
    return v, residual, diverged, used


@dataclass
class HypergradReport:
    hypergrad: list[np.ndarray]
    direct: list[np.ndarray]
    indirect: list[np.ndarray]
    direct_norm: float
    indirect_norm: float
    linear_residual_norm: float
    solver_rounds_used: int
    diverged: bool
    fallback_used: bool
    inner_value: float
    inner_grad_norm: float


def _norm(grads) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def _finite(grads, stage):
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError(f"non-finite values in hypergradient stage '{stage}'")


def implicit_hypergrad(objective, delta, cfg: LinSolveConfig, analytic: bool = False) -> HypergradReport:
    delta = np.asarray(delta, dtype=float)
    ev = objective.evaluate(delta)
    direct, g1 = ev.param_grads, ev.delta_grad
    _finite(direct + [g1], "direct gradients")
    op = HvpOperator(objective, delta, analytic)
    v, residual, diverged, used = solve_linear(op, g1, cfg)
    fallback = diverged and cfg.fallback_on_divergence
    if fallback:
        indirect = [np.zeros_like(g) for g in direct]
    else:
        _finite([v], "linear solve")
        indirect = cross_vp(objective, delta, v, analytic)
        _finite(indirect, "mixed product")
    hyper = [a + b for a, b in zip(direct, indirect)]
    return HypergradReport(
        hyper, direct, indirect, _norm(direct), _norm(indirect), float(residual), used,
        bool(diverged), bool(fallback), ev.loss, tc.l2_norm(g1),
    )


def contraction_rate(mu: float, L: float) -> tuple[float, float]:
    """Optimal ascent step ``2/(L+mu)`` and its contraction factor ``(k-1)/(k+1)``."""
    if mu <= 0 or L < mu:
        raise ValueError("need 0 < mu <= L")
    alpha = 2.0 / (L + mu)
    q = max(1 - alpha * mu, alpha * L - 1)
    return alpha, max(q, 0.0)


def inner_error_curve(
    oracle: QuadraticBilevel,
    theta,
    t_values,
    cfg: LinSolveConfig,
    step_size: float | None = None,
    analytic: bool = False,
) -> list[tuple[int, float]]:
    """Hypergradient error ``|approx - grad psi|`` after ``t`` inner ascent steps.

    The ascent uses the optimal step for the oracle's curvature unless
    ``step_size`` is given; no norm bound is active.
    """
    theta = np.asarray(theta, dtype=float)
    mu, L = oracle.curvature_bounds
    alpha = step_size if step_size is not None else contraction_rate(mu, L)[0]
    objective = oracle.at(theta)
    exact = oracle.grad_psi(theta)
    curve = []
    for t in t_values:
        if t == 0:
            delta = np.zeros(oracle.dim)
        else:
            delta = ascend(objective, InnerConfig(alpha, int(t), 1e300, False)).delta
        rep = implicit_hypergrad(objective, delta, cfg, analytic)
        curve.append((int(t), tc.l2_norm(rep.hypergrad[0] - exact)))
    return curve
