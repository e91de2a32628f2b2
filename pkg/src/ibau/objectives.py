"""Inner objectives ``H(delta, theta)`` with a common evaluation interface.

``NetObjective`` is the unlearning objective: mean cross-entropy of the
classifier on ``clamp(x + delta)`` against the true labels. ``QuadraticBilevel``
is a closed-form test problem

    H(delta, theta) = -1/2 delta^T A delta + delta^T (B theta + c) + w/2 |theta|^2

whose inner maximiser, value function and hypergradient are all known.

Gradients w.r.t. theta are always lists of arrays (one per parameter
tensor); the quadratic oracle uses a single-element list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .model import LossGrads, Params, loss_and_grads


class NetObjective:
    has_analytic = False

    def __init__(self, params: Params, x: np.ndarray, y, clamp: bool = True):
        if x.shape[0] == 0:
            raise ValueError("batch must be nonempty")
        self.params = params
        self.x = x
        self.y = np.asarray(y, dtype=np.int64)
        self.clamp = clamp

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def evaluate(self, delta, want_delta: bool = True, want_theta: bool = True) -> LossGrads:
        return loss_and_grads(self.params, self.x, self.y, delta, self.clamp, want_delta, want_theta)

    def value(self, delta) -> float:
        return self.evaluate(delta, want_delta=False, want_theta=False).loss


@dataclass
class QuadraticBilevel:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    theta_weight: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape[0] != d or self.c.shape != (d,):
            raise ValueError("inconsistent oracle shapes")
        if not np.array_equal(self.A, self.A.T):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() <= 0:
            raise ValueError("A must be positive definite")

    @classmethod
    def linear_coupling(cls, d: int) -> "QuadraticBilevel":
        """``H = -1/2 |delta|^2 + delta^T theta``; here grad psi(theta) = theta."""
        return cls(np.eye(d), np.eye(d), np.zeros(d))

    @classmethod
    def random(cls, d: int, p: int, rng: tc.SeededRng, cond: float = 10.0, theta_weight: float = 0.5,
               coupled: bool = True) -> "QuadraticBilevel":
        """Random SPD ``A`` with eigenvalues spread over ``[1, cond]``."""
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eig = np.linspace(1.0, cond, d)
        A = (q * eig) @ q.T
        A = 0.5 * (A + A.T)
        B = rng.standard_normal((d, p)) if coupled else np.zeros((d, p))
        return cls(A, B, rng.standard_normal(d), theta_weight)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def theta_dim(self) -> int:
        return self.B.shape[1]

    @property
    def curvature_bounds(self) -> tuple[float, float]:
        """``(mu, L)``: extreme eigenvalues of ``A`` (= of ``-grad_1^2 H``)."""
        eig = np.linalg.eigvalsh(self.A)
        return float(eig[0]), float(eig[-1])

    def at(self, theta) -> "QuadraticObjective":
        return QuadraticObjective(self, np.asarray(theta, dtype=float))

    def inner_argmax(self, theta) -> np.ndarray:
        return np.linalg.solve(self.A, self.B @ theta + self.c)

    def psi(self, theta) -> float:
        """Value function ``max_delta H(delta, theta)``."""
        b = self.B @ theta + self.c
        return float(0.5 * b @ np.linalg.solve(self.A, b) + 0.5 * self.theta_weight * theta @ theta)

    def grad_psi(self, theta) -> np.ndarray:
        return self.B.T @ self.inner_argmax(theta) + self.theta_weight * np.asarray(theta)

    def hypergrad_closed_form(self, delta, theta) -> np.ndarray:
        """``grad_2 H + B^T A^{-1} grad_1 H`` evaluated at an arbitrary ``delta``."""
        g1 = -self.A @ delta + self.B @ theta + self.c
        g2 = self.B.T @ delta + self.theta_weight * theta
        return g2 + self.B.T @ np.linalg.solve(self.A, g1)


class QuadraticObjective:
    has_analytic = True

    def __init__(self, oracle: QuadraticBilevel, theta: np.ndarray):
        self.oracle = oracle
        self.theta = theta

    @property
    def dim(self) -> int:
        return self.oracle.dim

    def evaluate(self, delta, want_delta: bool = True, want_theta: bool = True) -> LossGrads:
        o, th = self.oracle, self.theta
        delta = np.asarray(delta, dtype=float)
        b = o.B @ th + o.c
        value = -0.5 * delta @ o.A @ delta + delta @ b + 0.5 * o.theta_weight * th @ th
        return LossGrads(
            float(value),
            -o.A @ delta + b if want_delta else None,
            [o.B.T @ delta + o.theta_weight * th] if want_theta else None,
        )

    def value(self, delta) -> float:
        return self.evaluate(delta, False, False).loss

    def analytic_hvp(self, delta, v) -> np.ndarray:
        return -self.oracle.A @ v

    def analytic_cross(self, delta, v) -> list[np.ndarray]:
        return [self.oracle.B.T @ v]
