import os

# single-threaded BLAS keeps the few numpy.linalg calls in tests reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from ibau import tensor_core as tc


@pytest.fixture
def rng():
    return tc.make_rng(1234)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


@pytest.fixture(scope="session")
def poisoned_small():
    """A quickly trained backdoored MLP on 16-dim blobs: (params, clean, test, plan)."""
    from ibau.model import MlpSpec, TrainConfig, train
    from ibau.poison import PoisonEntry, PoisonPlan, make_synthetic_blobs, patch_trigger, poison_dataset, split

    data = make_synthetic_blobs(4, 16, 100, 0.05, tc.make_rng(0))
    train_set, clean, test = split(data, [0.6, 0.2, 0.2], 0)
    plan = PoisonPlan("single_target", [PoisonEntry(patch_trigger(16, [14, 15], [1.0, 1.0]), 0)], 0.2, 0)
    poisoned, _ = poison_dataset(train_set, plan)
    params, _ = train(poisoned, MlpSpec((16, 16, 4)), TrainConfig(epochs=30, seed=0))
    return params, clean, test, plan


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance_log():
    def log(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        _ACCEPTANCE[n] = line
        print(line)

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
