import numpy as np
import pytest

from ttga import SeededRng, build_schedule


@pytest.fixture(scope="session")
def default_schedule():
    return build_schedule()


@pytest.fixture()
def rng():
    return SeededRng(1234)


def relative_gradient_match(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Per-coordinate |a - n| <= rtol * max(|a|, |n|) + atol."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    return np.all(np.abs(analytic - numeric) <= bound)


def central_difference(f, x, h=1e-4):
    """Gradient of scalar f at vector x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2 * h)
    return grad
