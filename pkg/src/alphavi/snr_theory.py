"""Closed-form signal-to-noise ratios and variance bounds for Gaussian pairs.

All results concern the doubly-reparameterized estimator with mean-zero
Gaussians and gradients taken with respect to the scale parameters only.

``lambda`` denotes the variance ratio ``sigma_q**2 / sigma_p**2`` per
coordinate in the factorized case, or an eigenvalue of
``inv(Sigma_p) @ Sigma_q`` in the full-rank case. The "existence margin"
``min_i 1 + 2 alpha (lambda_i - 1)`` must be positive for the estimator to
have finite variance.

Products of per-coordinate factors are accumulated as sums of logs, since the
values of interest decay geometrically with dimension.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core_math import frobenius_norm_sq, solve_spd, sym_eigenvalues, trace
from .errors import ExistenceViolated


class SnrStatus(enum.Enum):
    DEFINED = "defined"
    UNDEFINED_INFINITE_VARIANCE = "undefined-infinite-variance"
    UNDEFINED_ZERO_ESTIMATOR = "undefined-zero-estimator"


@dataclass(frozen=True)
class SnrReport:
    status: SnrStatus
    value: Optional[float] = None
    upper_bound: Optional[float] = None
    existence_margin: float = math.nan
    log_value: Optional[float] = None

    @property
    def defined(self) -> bool:
        return self.status is SnrStatus.DEFINED


@dataclass(frozen=True)
class SpectralSummary:
    lambdas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        if not np.all(lam > 0):
            raise ValueError("lambda ratios must be positive")
        object.__setattr__(self, "lambdas", lam)

    @property
    def min(self) -> float:
        return float(self.lambdas.min())

    @property
    def max(self) -> float:
        return float(self.lambdas.max())

    @classmethod
    def factorized(cls, sigmas_p, sigmas_q) -> "SpectralSummary":
        sp = np.asarray(sigmas_p, dtype=np.float64)
        sq = np.asarray(sigmas_q, dtype=np.float64)
        return cls(sq**2 / sp**2)

    @classmethod
    def fullrank(cls, sigma_p, scale_q) -> "SpectralSummary":
        S = np.asarray(scale_q, dtype=np.float64)
        # S^T inv(Sigma_p) S is symmetric and similar to inv(Sigma_p) Sigma_q
        M = S.T @ solve_spd(sigma_p, S)
        return cls(sym_eigenvalues(0.5 * (M + M.T)))


def existence_margin(lambdas, alpha: float) -> float:
    lam = np.asarray(lambdas, dtype=np.float64)
    return float(np.min(1.0 + 2.0 * alpha * (lam - 1.0)))


def log_f_ratio(lam, alpha: float):
    lam = np.asarray(lam, dtype=np.float64)
    v = 1.0 + 2.0 * alpha * (lam - 1.0)
    if np.any(v <= 0):
        raise ExistenceViolated(f"1 + 2 alpha (lambda - 1) <= 0 for alpha={alpha}")
    return -0.5 * np.log1p(alpha**2 * (lam - 1.0) ** 2 / v)


def f_ratio(lam, alpha: float):
    """Per-dimension attenuation factor ``1/sqrt(1 + a^2 (l-1)^2 / (1 + 2a(l-1)))``."""
    out = np.exp(log_f_ratio(lam, alpha))
    return float(out) if np.ndim(out) == 0 else out


def ratio_power_snr(lam, alpha: float):
    """SNR of ``(p/q)^alpha`` for a pair of 1-d mean-zero Gaussians.

    Equal to :func:`f_ratio`; named separately because it is the factor the
    factorized composition rule multiplies in for every other coordinate.
    """
    return f_ratio(lam, alpha)


def compose_factorized_snr(component_snr: float, ratio_power_snrs: Sequence[float], alpha: float) -> float:
    """SNR of one component for arbitrary fully-factorized ``p`` and ``q_w``.

    ``component_snr`` is the SNR of the 1-d gradient estimator on coordinate
    ``j`` and ``ratio_power_snrs`` the SNRs of ``(p_i/q_i)^alpha`` for every
    other coordinate. These may come from closed forms or 1-d Monte Carlo.
    In the zero limit the other coordinates do not matter.
    """
    if alpha == 0:
        return float(component_snr)
    logs = np.log(np.asarray(ratio_power_snrs, dtype=np.float64))
    return float(np.exp(math.log(component_snr) + logs.sum()))


def snr_factorized_gaussian(sigmas_p, sigmas_q, alpha: float, j: int) -> SnrReport:
    """SNR of the scale component ``j`` (0-based) for factorized Gaussians."""
    sp = np.atleast_1d(np.asarray(sigmas_p, dtype=np.float64))
    sq = np.atleast_1d(np.asarray(sigmas_q, dtype=np.float64))
    if sp.shape != sq.shape:
        raise ValueError("sigmas_p and sigmas_q must have the same length")
    if not 0 <= j < sp.shape[0]:
        raise IndexError(f"component {j} out of range for d={sp.shape[0]}")
    lam = sq**2 / sp**2
    margin = existence_margin(lam, alpha)
    if sp[j] == sq[j]:
        return SnrReport(SnrStatus.UNDEFINED_ZERO_ESTIMATOR, existence_margin=margin)
    if alpha == 0:
        return SnrReport(SnrStatus.DEFINED, 1.0 / 3.0, existence_margin=margin, log_value=-math.log(3.0))
    if margin <= 0:
        return SnrReport(SnrStatus.UNDEFINED_INFINITE_VARIANCE, existence_margin=margin)
    logf = log_f_ratio(lam, alpha)
    v_j = 1.0 + 2.0 * alpha * (lam[j] - 1.0)
    log_value = math.log(v_j / 3.0) + 3.0 * logf[j] + (logf.sum() - logf[j])
    return SnrReport(SnrStatus.DEFINED, math.exp(log_value), existence_margin=margin, log_value=log_value)


def snr_fullrank_zero_limit(d: int) -> SnrReport:
    if d < 1:
        raise ValueError("d must be >= 1")
    return SnrReport(SnrStatus.DEFINED, 1.0 / (d + 2), existence_margin=1.0, log_value=-math.log(d + 2))


def _fullrank_common(sigma_p, scale_q, alpha):
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    S = np.asarray(scale_q, dtype=np.float64)
    sigma_q = S @ S.T
    spec = SpectralSummary.fullrank(sigma_p, S)
    margin = existence_margin(spec.lambdas, alpha)
    same = frobenius_norm_sq(sigma_p - sigma_q) <= 1e-24 * max(frobenius_norm_sq(sigma_p), 1e-300)
    return sigma_p, S, sigma_q, spec, margin, same


def snr_fullrank_exact(sigma_p, scale_q, alpha: float) -> SnrReport:
    """Exact SNR (Frobenius norm) of the gradient with respect to the full matrix ``S``."""
    sigma_p, S, sigma_q, spec, margin, same = _fullrank_common(sigma_p, scale_q, alpha)
    d = S.shape[0]
    if same:
        return SnrReport(SnrStatus.UNDEFINED_ZERO_ESTIMATOR, existence_margin=margin)
    if alpha == 0:
        return snr_fullrank_zero_limit(d)
    if margin <= 0:
        return SnrReport(SnrStatus.UNDEFINED_INFINITE_VARIANCE, existence_margin=margin)
    eye = np.eye(d)
    M = S.T @ solve_spd(sigma_p, S)
    M = 0.5 * (M + M.T)
    # B = (inv(Sigma_p) - inv(Sigma_q)) S
    B = solve_spd(sigma_p, S) - solve_spd(sigma_q, S)
    U = (1.0 - alpha) * eye + alpha * M
    V = (1.0 - 2.0 * alpha) * eye + 2.0 * alpha * M
    BU = solve_spd(U, B.T).T
    BV = solve_spd(V, B.T).T
    V_inv = solve_spd(V, eye)
    numer = frobenius_norm_sq(BU)
    denom = trace(V_inv) * trace(B @ V_inv @ B.T) + 2.0 * frobenius_norm_sq(BV)
    log_value = math.log(numer) - math.log(denom) + float(log_f_ratio(spec.lambdas, alpha).sum())
    return SnrReport(SnrStatus.DEFINED, math.exp(log_value), existence_margin=margin, log_value=log_value)


def fullrank_bound_value(lambdas, alpha: float) -> float:
    """Closed-form upper-bound formula for the full-rank SNR, as a function of the spectrum only."""
    spec = SpectralSummary(lambdas)
    if alpha > 0:
        num, den = 1.0 + alpha * (spec.min - 1.0), 1.0 + 2.0 * alpha * (spec.max - 1.0)
    else:
        num, den = 1.0 + alpha * (spec.max - 1.0), 1.0 + 2.0 * alpha * (spec.min - 1.0)
    return math.exp(2.0 * math.log(num / den) + float(log_f_ratio(spec.lambdas, alpha).sum()))


def snr_fullrank_bound(sigma_p, scale_q, alpha: float) -> SnrReport:
    sigma_p, S, sigma_q, spec, margin, same = _fullrank_common(sigma_p, scale_q, alpha)
    d = S.shape[0]
    if same:
        return SnrReport(SnrStatus.UNDEFINED_ZERO_ESTIMATOR, existence_margin=margin)
    if alpha == 0:
        r = snr_fullrank_zero_limit(d)
        return SnrReport(SnrStatus.DEFINED, r.value, upper_bound=r.value, existence_margin=margin, log_value=r.log_value)
    if margin <= 0:
        return SnrReport(SnrStatus.UNDEFINED_INFINITE_VARIANCE, existence_margin=margin)
    bound = fullrank_bound_value(spec.lambdas, alpha)
    return SnrReport(SnrStatus.DEFINED, upper_bound=bound, existence_margin=margin)


def variance_bound_factorized(sigmas_p, sigmas_q, alpha: float, j: int) -> float:
    """Upper bound on the variance of scale component ``j`` (0-based).

    The bound is the second moment ``E[g_j^2]`` itself.
    """
    if alpha == 0:
        raise ValueError("variance bound requires alpha != 0")
    sp = np.atleast_1d(np.asarray(sigmas_p, dtype=np.float64))
    sq = np.atleast_1d(np.asarray(sigmas_q, dtype=np.float64))
    if sp.shape != sq.shape:
        raise ValueError("sigmas_p and sigmas_q must have the same length")
    lam = sq**2 / sp**2
    v = 1.0 + 2.0 * alpha * (lam - 1.0)
    if np.any(v <= 0):
        raise ExistenceViolated("estimator has infinite variance")
    if sp[j] == sq[j]:
        return 0.0
    A = 3.0 * sq[j] ** 2 / v[j] ** 2 * (1.0 / sp[j] ** 2 - 1.0 / sq[j] ** 2) ** 2
    log_terms = 0.5 * (2.0 * alpha * np.log(lam) - np.log(v))
    return float(A * math.exp(log_terms.sum()))


def variance_bound_factors(lam, alpha: float) -> np.ndarray:
    """The per-coordinate factors ``sqrt(lambda^(2 alpha) / (1 + 2 alpha (lambda - 1)))``."""
    lam = np.asarray(lam, dtype=np.float64)
    v = 1.0 + 2.0 * alpha * (lam - 1.0)
    if np.any(v <= 0):
        raise ExistenceViolated("estimator has infinite variance")
    return np.exp(0.5 * (2.0 * alpha * np.log(lam) - np.log(v)))
