import numpy as np
import pytest

from core.softmoe_layer import build_layer
from core.tensor_core import RngStream


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(loss_fn, array, step=1e-6):
    """Central differences of a scalar loss w.r.t. every entry of `array` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + step
        plus = loss_fn()
        array[idx] = original - step
        minus = loss_fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


@pytest.fixture
def stream():
    return RngStream(1234, 'tests')


@pytest.fixture
def identity_layer():
    """d=1, n=1 layer with phi = 0 whose expert is the identity on nonnegative inputs."""
    layer = build_layer(1, 1, 1, RngStream(0, 'identity'))
    layer.router.phi[:] = 0.0
    layer.bank.w1[:] = 1.0
    layer.bank.b1[:] = 0.0
    layer.bank.w2[:] = 1.0
    layer.bank.b2[:] = 0.0
    return layer


def make_identity_layer(n):
    layer = build_layer(1, n, n, RngStream(0, f'identity{n}'))
    layer.router.phi[:] = 0.0
    layer.bank.w1[:] = 1.0
    layer.bank.b1[:] = 0.0
    layer.bank.w2[:] = 1.0
    layer.bank.b2[:] = 0.0
    return layer
