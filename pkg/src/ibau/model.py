"""MLP classifier, its loss/gradients, optimizers and the training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc

ACTIVATIONS = ("relu", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ValueError("need at least one hidden layer: [d, h, ..., C]")
        if any(d < 1 for d in dims):
            raise ValueError("layer dims must be positive")
        if dims[-1] < 2:
            raise ValueError("class count must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1


def default_spec(d: int, num_classes: int, activation: str = "relu") -> MlpSpec:
    return MlpSpec((d, 64, 32, num_classes), activation)


@dataclass
class Params:
    """Ordered ``name -> tensor`` map: ``W0, b0, W1, b1, ...``.

    Weights are stored fan_in x fan_out so a layer is ``x @ W + b``.
    """

    spec: MlpSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = []
        for i in range(self.spec.num_layers):
            expected += [(f"W{i}", (self.spec.layer_dims[i], self.spec.layer_dims[i + 1])),
                         (f"b{i}", (self.spec.layer_dims[i + 1],))]
        if [k for k, _ in expected] != list(self.tensors):
            raise ValueError(f"parameter names {list(self.tensors)} do not match spec")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[np.ndarray]:
        return list(self.tensors.values())

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def copy(self) -> "Params":
        return Params(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, values: list[np.ndarray]) -> "Params":
        return Params(self.spec, dict(zip(self.tensors, (np.array(v, dtype=float) for v in values))))

    def bitwise_equal(self, other: "Params") -> bool:
        if self.names() != other.names():
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.values(), other.values()))


def init_params(spec: MlpSpec, rng: tc.SeededRng) -> Params:
    tensors = {}
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        tensors[f"W{i}"] = tc.randn((fan_in, fan_out), rng, 0.0, np.sqrt(2.0 / fan_in))
        tensors[f"b{i}"] = tc.zeros((fan_out,))
    return Params(spec, tensors)


def _check_input(params: Params, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected n x {params.spec.input_dim} input, got {x.shape}")


def logits_on_tape(param_vars: list[ad.Var], x: ad.Var, activation: str) -> ad.Var:
    act = ad.relu if activation == "relu" else ad.sigmoid
    h = x
    n_layers = len(param_vars) // 2
    for i in range(n_layers):
        h = ad.add(h @ param_vars[2 * i], param_vars[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


def forward(params: Params, x: np.ndarray) -> np.ndarray:
    _check_input(params, x)
    vals = params.values()
    act = (lambda z: np.where(z > 0, z, 0.0)) if params.spec.activation == "relu" else (lambda z: 1.0 / (1.0 + np.exp(-z)))
    h = np.asarray(x, dtype=float)
    n_layers = len(vals) // 2
    for i in range(n_layers):
        h = tc.matmul(h, vals[2 * i]) + vals[2 * i + 1][None, :]
        if i < n_layers - 1:
            h = act(h)
    return h


def predict(params: Params, x: np.ndarray) -> np.ndarray:
    return tc.argmax_rows(forward(params, x))


def batch_loss(params: Params, x: np.ndarray, y, tape: ad.Tape | None = None):
    """Record the mean cross-entropy on ``tape``; returns ``(loss, param_vars)``."""
    _check_input(params, x)
    tape = tape or ad.Tape()
    pv = [tape.leaf(v) for v in params.values()]
    xv = tape.constant(x)
    return ad.cross_entropy_mean(logits_on_tape(pv, xv, params.spec.activation), y), pv


@dataclass
class LossGrads:
    loss: float
    delta_grad: np.ndarray | None
    param_grads: list[np.ndarray] | None


def loss_and_grads(
    params: Params,
    x: np.ndarray,
    y,
    delta: np.ndarray | None = None,
    clamp: bool = True,
    want_delta: bool = True,
    want_params: bool = True,
) -> LossGrads:
    """Mean cross-entropy of ``f(clamp(x + delta))`` and its partial gradients.

    ``delta`` is one perturbation shared by every row. With ``delta=None``
    the input is used as is and no delta gradient is produced.
    """
    _check_input(params, x)
    tape = ad.Tape()
    pv = [tape.leaf(v, requires_grad=want_params) for v in params.values()]
    inp = tape.constant(x)
    dv = None
    if delta is not None:
        dv = tape.leaf(delta, requires_grad=want_delta)
        inp = ad.add(inp, dv)
        if clamp:
            inp = ad.clamp01(inp)
    loss = ad.cross_entropy_mean(logits_on_tape(pv, inp, params.spec.activation), y)
    leaves = pv + ([dv] if dv is not None else [])
    grads = ad.backward(loss, leaves)
    return LossGrads(
        float(loss.value),
        grads[dv] if (dv is not None and want_delta) else None,
        [grads[v] for v in pv] if want_params else None,
    )


# -- optimizers --------------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def step(self, values: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [v - self.lr * g for v, g in zip(values, grads)]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, values: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for i, (p, g) in enumerate(zip(values, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


def train(dataset, spec: MlpSpec, cfg: TrainConfig) -> tuple[Params, list[float]]:
    """Mini-batch training from a seeded init; one fresh permutation per epoch.

    Returns the trained parameters and the mean batch loss of each epoch.
    """
    n = dataset.x.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = tc.make_rng(cfg.seed)
    params = init_params(spec, rng)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lg = loss_and_grads(params, dataset.x[idx], dataset.y[idx])
            params = params.replace(opt.step(params.values(), lg.param_grads))
            if not all(tc.all_finite(v) for v in params.values()):
                raise FloatingPointError("training produced non-finite weights")
            losses.append(lg.loss)
        history.append(float(np.mean(losses)))
        if not np.isfinite(history[-1]):
            raise FloatingPointError("training loss became non-finite")
    return params, history
