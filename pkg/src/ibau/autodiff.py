"""A small first-order reverse-mode autodiff tape over float64 numpy arrays.

Forward values are computed eagerly when an op is recorded. ``backward``
walks the tape once in reverse; a tape cannot be replayed until ``reset``.
Second derivatives are intentionally unsupported (see ``hypergrad``, which
takes finite differences of first-order gradients instead).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple[int, ...]
    backward: BackwardFn | None
    requires_grad: bool


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        value = tc.as_tensor(value)
        if not tc.all_finite(value):
            raise ValueError("leaf values must be finite")
        return self._push(value, (), None, requires_grad)

    def constant(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def _push(self, value, parents, backward, requires_grad) -> "Var":
        self.nodes.append(_Node(value, tuple(parents), backward, requires_grad))
        return Var(self, len(self.nodes) - 1)


@dataclass(frozen=True)
class Var:
    tape: Tape
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, c):
        if isinstance(c, Var):
            return mul(self, c)
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


class GradMap(dict):
    """``{leaf id: gradient}``; also indexable by the leaf ``Var`` itself."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Var):
            key = key.id
        return super().__contains__(key)


def _record(inputs: Sequence[Var], value: np.ndarray, backward: BackwardFn) -> Var:
    tape = inputs[0].tape
    for v in inputs[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    req = any(v.requires_grad for v in inputs)
    return tape._push(value, [v.id for v in inputs], backward, req)


# -- ops ---------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    """Elementwise sum. ``b`` may also be a vector broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return _record([a, b], a.value + b.value, lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record([a, b], a.value + b.value[None, :], lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _record([a, b], a.value - b.value, lambda g: (g, -g))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _record([a], a.value * c, lambda g: (g * c,))


def mul(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _record([a, b], av * bv, lambda g: (g * bv, g * av))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    out = tc.matmul(av, bv)
    return _record([a, b], out, lambda g: (tc.matmul(g, bv.T), tc.matmul(av.T, g)))


def take(a: Var, key) -> Var:
    """Basic (slice) indexing; the gradient is scattered back."""
    shape = a.shape
    out = np.array(a.value[key])

    def back(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)

    return _record([a], out, back)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _record([a], a.value.reshape(shape).copy(), lambda g: (np.reshape(g, old),))


def relu(a: Var) -> Var:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    return _record([a], np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _record([a], s, lambda g: (g * s * (1.0 - s),))


def clamp01(a: Var) -> Var:
    """``relu(z) - relu(z - 1)``, so the gradient follows the relu convention:
    0 at z <= 0, 1 on (0, 1], 0 above 1."""
    z = a.value
    mask = (z > 0) & ~(z > 1)
    return _record([a], np.clip(z, 0.0, 1.0), lambda g: (g * mask,))


def total(a: Var) -> Var:
    """Sum of all entries, as a scalar of shape ()."""
    shape = a.shape
    return _record([a], np.asarray(a.value.sum()), lambda g: (np.full(shape, float(g)),))


def log_softmax_rows(a: Var) -> Var:
    z = a.value
    if z.ndim != 2:
        raise ValueError("log_softmax_rows expects an n x C matrix")
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record([a], out, back)


def cross_entropy_mean(logits: Var, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    value = np.asarray(-logp.value[rows, labels].sum() / n)

    def back(g):
        out = np.zeros((n, c))
        out[rows, labels] = -float(g) / n
        return (out,)

    return _record([logp], value, back)


# -- reverse pass ------------------------------------------------------------


def backward(loss: Var, leaves: Sequence[Var]) -> GradMap:
    tape = loss.tape
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    for leaf in leaves:
        if leaf.tape is not tape:
            raise ValueError(f"leaf {leaf.id} is not on the loss's tape")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a backward pass; call reset()")
    tape._consumed = True

    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    for i in range(loss.id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.backward is None or not node.requires_grad:
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pg is None or not nodes[pid].requires_grad:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg

    out = GradMap()
    for leaf in leaves:
        if not leaf.requires_grad:
            continue
        g = grads[leaf.id] if leaf.id <= loss.id else None
        out[leaf.id] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
    return out


# -- finite-difference checking ---------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Per-coordinate ``|a-b| / max(|a|, |b|, floor)``; the floor keeps
    near-zero coordinates from amplifying finite-difference noise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(fn: Callable[[np.ndarray], float], point: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |x_i|)`` per coordinate."""
    point = tc.as_tensor(point)
    flat = point.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        h = rel_step * (1.0 + abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp.reshape(point.shape)) - fn(xm.reshape(point.shape))) / (2.0 * h)
    return out.reshape(point.shape)


def grad_check(
    fn: Callable[[Var], Var],
    point,
    tolerance: float = 1e-5,
    gradient: Callable[[np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a Var (on a fresh tape) to a scalar Var. Passing ``gradient``
    overrides the reverse-mode path, which is how negative controls are built.
    """
    point = tc.as_tensor(point)

    def value(x):
        tape = Tape()
        return float(fn(tape.leaf(x)).value)

    if gradient is None:
        tape = Tape()
        x = tape.leaf(point)
        analytic = backward(fn(x), [x])[x]
    else:
        analytic = np.asarray(gradient(point), dtype=float)
    numeric = numeric_gradient(value, point)
    rel = relative_error(analytic, numeric)
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, tolerance, analytic, numeric, rel)
