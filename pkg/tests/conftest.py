import numpy as np
import pytest

from sepgnet.autodiff import Tensor


def finite_difference_check(make_loss, params, eps=1e-5):
    """Compare analytic gradients of a scalar loss against central differences.

    make_loss rebuilds the graph from the given parameter tensors (float64)
    on every call. Returns the worst relative error over all parameters.
    """
    loss = make_loss()
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(make_loss().data)
            flat[i] = orig - eps
            down = float(make_loss().data)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * eps)
        scale = max(1.0, np.abs(ana).max(), np.abs(numeric).max())
        worst = max(worst, float(np.abs(ana - numeric).max() / scale))
    return worst


@pytest.fixture
def gradcheck():
    return finite_difference_check


def tensor64(rng, *shape, requires_grad=True, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float64),
                  requires_grad=requires_grad)


@pytest.fixture
def make_tensor64():
    return tensor64
