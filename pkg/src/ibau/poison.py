"""Datasets, backdoor triggers and poisoning plans.

Supported attack layouts:

* ``single_target``: one trigger, poisoned rows are relabelled to the target.
* ``all_to_all``: one trigger, a poisoned row of class ``y`` gets ``(y+1) % C``.
* ``multi_trigger``: several (trigger, target) pairs; each pair contributes
  its own poisoned copies, appended after the clean rows.

Single-target and all-to-all poison in place (rows are replaced).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc

TRIGGER_KINDS = ("patch", "blend", "noise")
POISON_MODES = ("single_target", "all_to_all", "multi_trigger")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"inconsistent shapes x={self.x.shape} y={self.y.shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0 or not np.all(np.isfinite(self.x))):
            raise ValueError("features must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)


@dataclass
class TriggerSpec:
    kind: str
    mask: np.ndarray
    pattern: np.ndarray
    blend_alpha: float = 0.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"trigger kind must be one of {TRIGGER_KINDS}")
        if self.mask.shape != self.pattern.shape or self.mask.ndim != 1:
            raise ValueError("mask and pattern must be vectors of equal length")
        if np.any((self.mask < 0) | (self.mask > 1)) or np.any((self.pattern < 0) | (self.pattern > 1)):
            raise ValueError("mask and pattern entries must lie in [0, 1]")
        if self.kind == "patch" and not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("patch masks must be binary")
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ValueError("blend_alpha must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return int(self.mask.shape[0])


def patch_trigger(d: int, dims: Sequence[int], values: Sequence[float] | float = 1.0) -> TriggerSpec:
    mask = np.zeros(d)
    pattern = np.zeros(d)
    mask[list(dims)] = 1.0
    pattern[list(dims)] = values
    return TriggerSpec("patch", mask, pattern)


def trigger_l2_norm(trigger: TriggerSpec) -> float:
    """Norm of the trigger itself measured against an all-zero input."""
    return tc.l2_norm(apply_trigger(np.zeros(trigger.dim), trigger))


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Stamp ``trigger`` on a row (or on every row of a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trigger.dim:
        raise ValueError(f"row length {x.shape[-1]} does not match trigger length {trigger.dim}")
    m, p = trigger.mask, trigger.pattern
    if trigger.kind == "patch":
        out = (1.0 - m) * x + m * p
    elif trigger.kind == "noise":
        out = x + m * (2.0 * p - 1.0)
    else:
        a = trigger.blend_alpha
        out = (1.0 - a) * x + a * p
    return tc.clamp01(out)


@dataclass
class PoisonEntry:
    trigger: TriggerSpec
    target: int = 0


@dataclass
class PoisonPlan:
    mode: str
    entries: list[PoisonEntry]
    poison_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in POISON_MODES:
            raise ValueError(f"mode must be one of {POISON_MODES}")
        if not self.entries:
            raise ValueError("a poison plan needs at least one entry")
        if self.mode != "multi_trigger" and len(self.entries) != 1:
            raise ValueError(f"{self.mode} takes exactly one entry")
        if not 0.0 <= self.poison_ratio <= 1.0:
            raise ValueError("poison_ratio must lie in [0, 1]")
        targets = [e.target for e in self.entries]
        if self.mode == "multi_trigger" and len(set(targets)) != len(targets):
            raise ValueError("multi_trigger targets must be pairwise distinct")


def poison_dataset(clean: Dataset, plan: PoisonPlan) -> tuple[Dataset, list[np.ndarray]]:
    """Apply ``plan``; returns the poisoned dataset and, per entry, the row
    indices (into the returned dataset) that carry that entry's trigger."""
    n = len(clean)
    count = int(np.floor(plan.poison_ratio * n))
    if count < 1:
        raise ValueError(f"poison_ratio {plan.poison_ratio} yields no poisoned rows for n={n}")
    for e in plan.entries:
        if plan.mode != "all_to_all" and not 0 <= e.target < clean.num_classes:
            raise ValueError(f"target {e.target} out of range")
        if e.trigger.dim != clean.dim:
            raise ValueError("trigger length does not match feature dimension")
    rng = tc.make_rng(plan.seed)
    C = clean.num_classes

    if plan.mode == "all_to_all":
        idx = np.sort(rng.choice(n, size=count, replace=False))
        x, y = clean.x.copy(), clean.y.copy()
        x[idx] = apply_trigger(x[idx], plan.entries[0].trigger)
        y[idx] = (y[idx] + 1) % C
        return Dataset(x, y, C), [idx]

    def pick(target):
        pool = np.flatnonzero(clean.y != target)
        if pool.size < count:
            raise ValueError(f"only {pool.size} non-target rows available, need {count}")
        return np.sort(rng.choice(pool, size=count, replace=False))

    if plan.mode == "single_target":
        e = plan.entries[0]
        idx = pick(e.target)
        x, y = clean.x.copy(), clean.y.copy()
        x[idx] = apply_trigger(x[idx], e.trigger)
        y[idx] = e.target
        return Dataset(x, y, C), [idx]

    xs, ys, index_sets = [clean.x], [clean.y], []
    offset = n
    for e in plan.entries:
        idx = pick(e.target)
        xs.append(apply_trigger(clean.x[idx], e.trigger))
        ys.append(np.full(count, e.target, dtype=np.int64))
        index_sets.append(np.arange(offset, offset + count))
        offset += count
    return Dataset(np.vstack(xs), np.concatenate(ys), C), index_sets


def make_synthetic_blobs(C: int, d: int, n_per_class: int, spread: float, rng: tc.SeededRng) -> Dataset:
    """Gaussian clusters around one-hot-block centres, rescaled into [0, 1].

    Feature ``j`` belongs to class ``j % C``: the centre of class ``c`` is 1 on
    its own features and 0 elsewhere, so centres sit on the vertices of a
    scaled simplex whenever ``d >= C``.
    """
    if C < 2 or d < 1 or n_per_class < 1 or spread < 0:
        raise ValueError("invalid blob parameters")
    centres = np.zeros((C, d))
    for j in range(d):
        centres[j % C, j] = 1.0
    y = np.repeat(np.arange(C), n_per_class)
    x = centres[y] + tc.randn((C * n_per_class, d), rng, 0.0, spread) if spread > 0 else centres[y].copy()
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(tc.clamp01(x), y, C)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = len(dataset)
    order = tc.make_rng(seed).permutation(n)
    bounds = [0] + [int(round(c * n)) for c in np.cumsum(fractions)[:-1]] + [n]
    return [dataset.subset(np.sort(order[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]


# -- CSV ---------------------------------------------------------------------


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.dim
    lines = ["label," + ",".join(f"f{j}" for j in range(d))]
    for row, label in zip(dataset.x, dataset.y):
        lines.append(str(int(label)) + "," + ",".join(format(float(v), ".17g") for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_csv(path, num_classes: int | None = None) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].strip().split(",")
    if header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)] or len(header) < 2:
        raise DataFormatError(f"{path}:1: header must be 'label,f0,f1,...'")
    d = len(header) - 1
    xs, ys = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 1:
            raise DataFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(cells)}")
        try:
            label = int(cells[0])
            feats = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataFormatError(f"{path}:{lineno}: bad label {label}")
        if any(not (0.0 <= f <= 1.0) for f in feats):
            raise DataFormatError(f"{path}:{lineno}: feature outside [0, 1]")
        xs.append(feats)
        ys.append(label)
    if not xs:
        raise DataFormatError(f"{path}: no data rows")
    y = np.array(ys, dtype=np.int64)
    C = num_classes if num_classes is not None else max(int(y.max()) + 1, 2)
    return Dataset(np.array(xs, dtype=np.float64), y, C)


# -- IDX ---------------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def _bin_edges(n: int, k: int) -> list[int]:
    return [int(np.floor(i * n / k)) for i in range(k + 1)]


def average_pool(images: np.ndarray, size: int) -> np.ndarray:
    """Area-average ``n x r x c`` images to ``n x size x size``."""
    _, r, c = images.shape
    if size < 1 or size > min(r, c):
        raise ValueError(f"cannot downsample {r}x{c} to {size}x{size}")
    re, ce = _bin_edges(r, size), _bin_edges(c, size)
    out = np.empty((images.shape[0], size, size))
    for i in range(size):
        for j in range(size):
            out[:, i, j] = images[:, re[i]:re[i + 1], ce[j]:ce[j + 1]].mean(axis=(1, 2))
    return out


def load_idx(images_path, labels_path, downsample_to: int | None = None, num_classes: int | None = None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3).astype(np.float64) / 255.0
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if downsample_to is not None:
        images = average_pool(images, downsample_to)
    C = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(images.reshape(images.shape[0], -1), labels, C)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (images if rank 3, labels if rank 1)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes())
