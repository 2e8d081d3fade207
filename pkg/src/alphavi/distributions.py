"""Gaussian variational families and target densities.

Every method is batched over leading axes: ``z`` and ``eps`` may have shape
``(d,)`` or ``(..., d)``, and parameter-space outputs have shape
``(..., n_params)``.

Flattened parameter layout is ``[mean (d)]`` followed by the scale block:
``sigma (d)`` for :class:`DiagonalGaussian`, the row-major lower triangle of
``S`` (``d(d+1)/2``) for :class:`FullRankGaussian`, or all ``d*d`` entries of
``S`` when ``dense_grad=True``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .core_math import cholesky
from .errors import DimensionMismatch

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_last_dim(x: np.ndarray, d: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (d,):
        raise DimensionMismatch(f"{name} has trailing dimension {x.shape[-1:]}, expected ({d},)")
    return x


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """``N(mean, diag(scales**2))`` reparameterized as ``mean + scales * eps``."""

    mean: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if mean.shape != scales.shape or mean.ndim != 1:
            raise DimensionMismatch("mean and scales must be vectors of equal length")
        if not np.all(scales > 0):
            raise ValueError("scales must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scales", scales)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.dim

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean, self.scales])

    @classmethod
    def from_flat(cls, flat) -> "DiagonalGaussian":
        flat = np.asarray(flat, dtype=np.float64)
        d = flat.shape[0] // 2
        return cls(flat[:d], flat[d:])

    def with_flat(self, flat) -> "DiagonalGaussian":
        return self.from_flat(flat)

    def mean_mask(self) -> np.ndarray:
        return np.arange(self.n_params) < self.dim

    def positive_mask(self) -> np.ndarray:
        return ~self.mean_mask()

    def reparam(self, eps) -> np.ndarray:
        eps = _check_last_dim(eps, self.dim, "eps")
        return self.mean + self.scales * eps

    def log_density(self, z) -> np.ndarray:
        z = _check_last_dim(z, self.dim, "z")
        u = (z - self.mean) / self.scales
        return -0.5 * np.sum(u * u, axis=-1) - np.sum(np.log(self.scales)) - 0.5 * self.dim * LOG_2PI

    def grad_log_density_z(self, z) -> np.ndarray:
        z = _check_last_dim(z, self.dim, "z")
        return -(z - self.mean) / self.scales**2

    def param_jacobian_apply(self, eps, cotangent) -> np.ndarray:
        """Gradient of ``<cotangent, reparam(eps)>`` with respect to the flat parameters."""
        eps = _check_last_dim(eps, self.dim, "eps")
        cotangent = _check_last_dim(cotangent, self.dim, "cotangent")
        return np.concatenate(np.broadcast_arrays(cotangent, cotangent * eps), axis=-1)

    def entropy_param_grad(self, z) -> np.ndarray:
        """Gradient of ``log q_w(z)`` with respect to the parameters, holding ``z`` fixed."""
        z = _check_last_dim(z, self.dim, "z")
        r = z - self.mean
        s2 = self.scales**2
        return np.concatenate([r / s2, (r * r - s2) / (s2 * self.scales)], axis=-1)

    def covariance(self) -> np.ndarray:
        return np.diag(self.scales**2)


@dataclass(frozen=True, eq=False)
class FullRankGaussian:
    """``N(mean, S S^T)`` reparameterized as ``mean + S @ eps``.

    ``scale`` must be lower triangular with a positive diagonal unless
    ``dense_grad`` is set, in which case any invertible matrix is accepted and
    gradients cover every entry of ``S``.
    """

    mean: np.ndarray
    scale: np.ndarray
    dense_grad: bool = False
    _lower: bool = field(default=True, init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        S = np.asarray(self.scale, dtype=np.float64)
        d = mean.shape[0]
        if mean.ndim != 1 or S.shape != (d, d):
            raise DimensionMismatch(f"scale must be ({d}, {d}), got {S.shape}")
        lower = bool(np.all(np.triu(S, 1) == 0.0))
        if not self.dense_grad:
            if not lower:
                raise ValueError("scale must be lower triangular")
            if not np.all(np.diag(S) > 0):
                raise ValueError("scale diagonal must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", S)
        object.__setattr__(self, "_lower", lower)

    @classmethod
    def from_covariance(cls, mean, cov, dense_grad=False) -> "FullRankGaussian":
        return cls(mean, cholesky(cov), dense_grad=dense_grad)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_params(self) -> int:
        d = self.dim
        return d + (d * d if self.dense_grad else d * (d + 1) // 2)

    def _tril(self):
        return np.tril_indices(self.dim)

    def flat(self) -> np.ndarray:
        block = self.scale.ravel() if self.dense_grad else self.scale[self._tril()]
        return np.concatenate([self.mean, block])

    def with_flat(self, flat) -> "FullRankGaussian":
        flat = np.asarray(flat, dtype=np.float64)
        d = self.dim
        if self.dense_grad:
            S = flat[d:].reshape(d, d).copy()
        else:
            S = np.zeros((d, d))
            S[self._tril()] = flat[d:]
        return FullRankGaussian(flat[:d], S, dense_grad=self.dense_grad)

    def mean_mask(self) -> np.ndarray:
        return np.arange(self.n_params) < self.dim

    def positive_mask(self) -> np.ndarray:
        d = self.dim
        mask = np.zeros(self.n_params, dtype=bool)
        if self.dense_grad:
            mask[d + np.arange(d) * (d + 1)] = True
        else:
            rows, cols = self._tril()
            mask[d:] = rows == cols
        return mask

    def covariance(self) -> np.ndarray:
        return self.scale @ self.scale.T

    def _whiten(self, z) -> np.ndarray:
        """``u`` with ``S u = z - mean``; batched, shape of ``z``."""
        r = np.asarray(z) - self.mean
        flat = r.reshape(-1, self.dim).T
        if self._lower:
            u = solve_triangular(self.scale, flat, lower=True)
        else:
            u = np.linalg.solve(self.scale, flat)
        return u.T.reshape(r.shape)

    def _inv_t(self, u) -> np.ndarray:
        """``S^{-T} u``, batched."""
        u = np.asarray(u)
        flat = u.reshape(-1, self.dim).T
        if self._lower:
            w = solve_triangular(self.scale, flat, lower=True, trans="T")
        else:
            w = np.linalg.solve(self.scale.T, flat)
        return w.T.reshape(u.shape)

    def _log_abs_det(self) -> float:
        if self._lower:
            return float(np.sum(np.log(np.abs(np.diag(self.scale)))))
        return float(np.linalg.slogdet(self.scale)[1])

    def reparam(self, eps) -> np.ndarray:
        eps = _check_last_dim(eps, self.dim, "eps")
        return self.mean + eps @ self.scale.T

    def log_density(self, z) -> np.ndarray:
        z = _check_last_dim(z, self.dim, "z")
        u = self._whiten(z)
        return -0.5 * np.sum(u * u, axis=-1) - self._log_abs_det() - 0.5 * self.dim * LOG_2PI

    def grad_log_density_z(self, z) -> np.ndarray:
        z = _check_last_dim(z, self.dim, "z")
        return -self._inv_t(self._whiten(z))

    def _scale_block(self, outer: np.ndarray) -> np.ndarray:
        if self.dense_grad:
            return outer.reshape(outer.shape[:-2] + (self.dim * self.dim,))
        rows, cols = self._tril()
        return outer[..., rows, cols]

    def param_jacobian_apply(self, eps, cotangent) -> np.ndarray:
        eps = _check_last_dim(eps, self.dim, "eps")
        cotangent = _check_last_dim(cotangent, self.dim, "cotangent")
        cotangent, eps = np.broadcast_arrays(cotangent, eps)
        outer = cotangent[..., :, None] * eps[..., None, :]
        return np.concatenate([cotangent, self._scale_block(outer)], axis=-1)

    def entropy_param_grad(self, z) -> np.ndarray:
        z = _check_last_dim(z, self.dim, "z")
        u = self._whiten(z)
        w = self._inv_t(u)
        s_inv_t = self._inv_t(np.eye(self.dim)).T  # S^{-T}
        outer = w[..., :, None] * u[..., None, :] - s_inv_t
        return np.concatenate([w, self._scale_block(outer)], axis=-1)


class GaussianTarget:
    """A normalized Gaussian target density wrapping a family member.

    Delegates to the wrapped distribution so that a target built from the same
    parameters as ``q`` evaluates bit-for-bit identically.
    """

    normalized = True

    def __init__(self, dist):
        self.dist = dist

    @property
    def dim(self) -> int:
        return self.dist.dim

    def log_density(self, z) -> np.ndarray:
        return self.dist.log_density(z)

    def grad_log_density(self, z) -> np.ndarray:
        return self.dist.grad_log_density_z(z)

    def __repr__(self):
        return f"GaussianTarget({self.dist!r})"


def make_factorized_gaussian_target(mean, scales) -> GaussianTarget:
    return GaussianTarget(DiagonalGaussian(mean, scales))


def make_fullrank_gaussian_target(mean, cov) -> GaussianTarget:
    return GaussianTarget(FullRankGaussian.from_covariance(mean, cov))
