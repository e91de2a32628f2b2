"""Dense float64 tensors and the seeded RNG used across the package.

Tensors are plain ``numpy.ndarray`` objects with dtype float64, C (row-major)
layout. Every function here returns a fresh array and never mutates its
inputs.

Randomness comes from numpy's ``Philox`` bit generator (a counter-based
4x64 generator), wrapped in ``numpy.random.Generator``. The stream for a given
seed is identical on every platform.

``matmul`` deliberately avoids BLAS: it uses numpy's own einsum loop on
contiguous operands, which accumulates each dot product in index order. That
makes results bitwise reproducible and identical to a naive triple loop,
at the cost of raw speed (irrelevant at the sizes used here).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

Tensor = np.ndarray
SeededRng = np.random.Generator

DTYPE = np.float64


def make_rng(seed: int) -> SeededRng:
    """Return a Philox-backed generator for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return shape


def as_tensor(data) -> Tensor:
    return np.array(data, dtype=DTYPE, order="C", copy=True)


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def randn(shape: Sequence[int], rng: SeededRng, mean: float = 0.0, stddev: float = 1.0) -> Tensor:
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    shape = _check_shape(shape)
    return mean + stddev * rng.standard_normal(shape, dtype=DTYPE)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return np.einsum(
        "ik,kj->ij",
        np.ascontiguousarray(a, dtype=DTYPE),
        np.ascontiguousarray(b, dtype=DTYPE),
        optimize=False,
    )


def l2_norm(t: Tensor) -> float:
    flat = np.ravel(t)
    sq = float(np.dot(flat, flat))
    if 1e-280 < sq < np.inf or flat.size == 0:
        return float(np.sqrt(sq))
    # squared sum under- or overflowed: rescale by the largest magnitude
    m = float(np.max(np.abs(flat)))
    if m == 0.0 or not np.isfinite(m):
        return m
    scaled = flat / m
    return m * float(np.sqrt(np.dot(scaled, scaled)))


def clamp01(t: Tensor) -> Tensor:
    return np.clip(t, 0.0, 1.0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a - b


def scale(t: Tensor, c: float) -> Tensor:
    return t * float(c)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a * b


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ValueError("transpose expects a rank-2 tensor")
    return np.ascontiguousarray(t.T)


def argmax_rows(t: Tensor) -> np.ndarray:
    """Index of the max along the last axis; ties resolve to the lowest index."""
    # np.argmax already returns the first occurrence of the maximum.
    return np.argmax(t, axis=-1)


def all_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t)))


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
