"""Reproducible random streams and the small dense linear algebra kernel.

Matrices are plain ``float64`` numpy arrays. The heavy lifting is delegated to
numpy/LAPACK; this module adds the tolerance checks the rest of the package
relies on.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefinite, NotSquare, NotSymmetric

PIVOT_FLOOR = 1e-12
SYMMETRY_TOL = 1e-10


class RngStream:
    """A deterministic stream of random numbers keyed by ``(seed, stream_id)``.

    Backed by the counter-based Philox bit generator. ``substream(*keys)``
    derives an independent child stream, which is how parallel replications
    get reproducible, non-overlapping randomness regardless of scheduling.
    """

    def __init__(self, seed: int = 0, stream_id: int = 0, _path: tuple = ()):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = (self.stream_id,) + tuple(int(k) for k in _path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self._path[1:] + tuple(keys))

    def standard_normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self._path[1:]})"


def sample_std_normal(rng: RngStream, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be >= 1")
    return rng.standard_normal(d)


def _square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {a.shape}")
    return a


def _check_symmetric(a: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NotPositiveDefinite` when LAPACK fails or any pivot
    ``L[i, i]**2`` falls at or below ``PIVOT_FLOOR``.
    """
    a = _square(a)
    _check_symmetric(a)
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.any(np.diag(L) ** 2 <= PIVOT_FLOOR):
        raise NotPositiveDefinite("pivot below floor")
    return L


def sym_eigenvalues(a) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending."""
    a = _square(a)
    _check_symmetric(a)
    return np.linalg.eigvalsh(0.5 * (a + a.T))


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``."""
    L = cholesky(a)
    b = np.asarray(b, dtype=np.float64)
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, y, lower=False)


def frobenius_norm_sq(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def trace(a) -> float:
    return float(np.trace(_square(a)))
