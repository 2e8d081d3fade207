import numpy as np
import pytest

from alphavi.core_math import RngStream


@pytest.fixture
def rng():
    return RngStream(seed=20240611)


def random_spd_matrix(gen: np.random.Generator, d: int) -> np.ndarray:
    A = gen.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


def central_fd(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_close(analytic, numeric, rtol=1e-5, atol=1e-7):
    """``|a - b| <= rtol * |b| + atol`` in the Euclidean norm."""
    a, b = np.ravel(analytic), np.ravel(numeric)
    return np.linalg.norm(a - b) <= rtol * np.linalg.norm(b) + atol
