import sys

import numpy as np
import pytest

from dtrnet import tensor as T
from dtrnet.model import ModelConfig, build_model


def numeric_grad(fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        up = fn()
        array[idx] = old - h
        down = fn()
        array[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger gradient magnitude of the two."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_grads(loss_fn, tensors, h: float = 1e-5) -> float:
    """Worst relative error over ``tensors`` between tape and finite-difference gradients."""
    for t in tensors:
        t.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    def value():
        with T.no_tape():
            return float(loss_fn().data)

    worst = 0.0
    for t in tensors:
        assert t.grad is not None, f"no gradient reached {t!r}"
        worst = max(worst, relative_error(t.grad, numeric_grad(value, t.data, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(n_layers=4, d_model=8, d_ff=16, n_heads=2, vocab_size=11, max_seq_len=32, precision="float64")
    base.update(overrides)
    return ModelConfig(**base)


def randomize(model, rng, scale: float = 0.3):
    """Give every parameter (router W2 included) generic nonzero values."""
    for name, p in model.params.items():
        if name.endswith(("norm1", "norm2", "norm_f")):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape)
        else:
            p.data[...] = scale * rng.standard_normal(p.shape)
    return model


@pytest.fixture
def tiny_model(rng):
    return randomize(build_model(tiny_config()), rng)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
