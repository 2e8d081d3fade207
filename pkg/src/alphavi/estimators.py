"""Unbiased single-sample estimators of alpha-divergences and their gradients.

Two gradient estimators are provided for ``grad_w D_alpha(p || q_w)``:

* ``g_rep``: plain reparameterization, differentiating ``(p/q_w)^alpha``
  through both the sample path and the density of ``q_w``;
* ``g_drep``: double reparameterization, where the density of ``q`` is held
  at ``v = w`` and only the sample path is differentiated. It is exactly zero
  when ``p == q_w``. Its ``alpha -> 0`` limit is the sticking-the-landing
  estimator.

The ``*_samples`` functions are batched over ``eps`` of shape ``(n, d)``; rows
whose ratio power would overflow come back as NaN so that Monte Carlo
callers can count and drop them. The single-sample wrappers raise
:class:`~alphavi.errors.NonFinite` instead.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core_math import RngStream
from .errors import NonFinite, RegimeUnsupported

EXP_LIMIT = 700.0


class Regime(enum.Enum):
    ZERO_LIMIT = "zero-limit"
    ONE = "one"
    GENERAL = "general"


@dataclass(frozen=True)
class AlphaParam:
    value: float
    regime: Regime

    @classmethod
    def of(cls, alpha) -> "AlphaParam":
        """Tag a plain number. ``0`` means the ``alpha -> 0`` limit."""
        if isinstance(alpha, AlphaParam):
            return alpha
        alpha = float(alpha)
        if alpha == 0.0:
            return cls(0.0, Regime.ZERO_LIMIT)
        if alpha == 1.0:
            return cls(1.0, Regime.ONE)
        return cls(alpha, Regime.GENERAL)

    def __float__(self):
        return self.value

    def __str__(self):
        return "0" if self.regime is Regime.ZERO_LIMIT else f"{self.value:g}"


@dataclass(frozen=True)
class GradEstimate:
    values: np.ndarray
    n_samples_averaged: int = 1

    def __len__(self):
        return self.values.shape[-1]


def log_ratio(target, q, eps) -> np.ndarray:
    """``log p(T_w(eps)) - log q_w(T_w(eps))``; batched."""
    z = q.reparam(eps)
    return target.log_density(z) - q.log_density(z)


def _target_value_and_grad(target, z):
    fused = getattr(target, "log_density_and_grad", None)
    if fused is not None:
        return fused(z)
    return target.log_density(z), target.grad_log_density(z)


def ratio_power(alpha: float, lr: np.ndarray) -> np.ndarray:
    """``exp(alpha * lr)``, NaN where that would overflow."""
    arg = alpha * lr
    out = np.exp(np.minimum(arg, EXP_LIMIT))
    return np.where(arg > EXP_LIMIT, np.nan, out)


def divergence_estimate(target, q, alpha, eps) -> np.ndarray:
    """Single-sample unbiased estimate of ``D_alpha(p || q_w)``.

    The zero limit estimates ``KL(q_w || p)``.
    """
    a = AlphaParam.of(alpha)
    lr = log_ratio(target, q, eps)
    if a.regime is Regime.ZERO_LIMIT:
        return -lr
    if a.regime is Regime.ONE:
        raise RegimeUnsupported("no value estimator for alpha = 1")
    return (ratio_power(a.value, lr) - 1.0) / (a.value * (a.value - 1.0))


def _select(values: np.ndarray, active) -> np.ndarray:
    return values if active is None else values[..., active]


def rep_grad_samples(target, q, alpha, eps, active=None) -> np.ndarray:
    a = AlphaParam.of(alpha)
    if a.regime is Regime.ONE:
        raise RegimeUnsupported("g_rep is not defined for alpha = 1; use g_drep")
    eps = np.asarray(eps, dtype=np.float64)
    z = q.reparam(eps)
    lp, gp = _target_value_and_grad(target, z)
    gq = q.grad_log_density_z(z)
    direct = q.entropy_param_grad(z)
    if a.regime is Regime.ZERO_LIMIT:
        g = q.param_jacobian_apply(eps, gq - gp) + direct
    else:
        lr = lp - q.log_density(z)
        weight = ratio_power(a.value, lr) / (a.value - 1.0)
        g = weight[..., None] * (q.param_jacobian_apply(eps, gp - gq) - direct)
    return _select(g, active)


def drep_grad_samples(target, q, alpha, eps, active=None) -> np.ndarray:
    a = AlphaParam.of(alpha)
    eps = np.asarray(eps, dtype=np.float64)
    z = q.reparam(eps)
    lp, gp = _target_value_and_grad(target, z)
    path = q.param_jacobian_apply(eps, gp - q.grad_log_density_z(z))
    if a.regime is Regime.ZERO_LIMIT:
        g = -path
    else:
        lr = lp - q.log_density(z)
        g = -ratio_power(a.value, lr)[..., None] * path
    return _select(g, active)


def _single(samples_fn, target, q, alpha, eps, active) -> GradEstimate:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 1:
        raise ValueError("single-sample estimators take eps of shape (d,)")
    g = samples_fn(target, q, alpha, eps, active)
    if not np.all(np.isfinite(g)):
        raise NonFinite("ratio power overflowed", count=1)
    return GradEstimate(g, 1)


def g_rep(target, q, alpha, eps, active=None) -> GradEstimate:
    return _single(rep_grad_samples, target, q, alpha, eps, active)


def g_drep(target, q, alpha, eps, active=None) -> GradEstimate:
    return _single(drep_grad_samples, target, q, alpha, eps, active)


ESTIMATORS = {"rep": rep_grad_samples, "drep": drep_grad_samples}


def averaged(samples_fn, target, q, alpha, n: int, rng: RngStream, active=None) -> GradEstimate:
    """Mean of ``n`` independent single-sample estimates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eps = rng.standard_normal((n, q.dim))
    g = samples_fn(target, q, alpha, eps, active)
    bad = ~np.all(np.isfinite(g), axis=-1)
    if np.any(bad):
        raise NonFinite("ratio power overflowed", count=int(bad.sum()))
    return GradEstimate(g.mean(axis=0), n)
