"""Monte Carlo estimates of the SNR, mean and variance of gradient estimators.

A *sampler* is any callable ``sampler(rng, m) -> array of shape (m, P)``
returning ``m`` independent draws of a ``P``-dimensional estimator
(matrix-valued estimators are flattened, so norms are Frobenius norms).

Samples are generated in fixed-size chunks. Chunk ``k`` always draws from
``rng.substream(k)`` and chunk moments are merged in chunk order, so the
result does not depend on how many workers are used.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core_math import RngStream
from .errors import DegenerateAllZero, NonFinite
from .estimators import ESTIMATORS

DEFAULT_CHUNK = 100_000
SNR_SLACK = 1e-9

Sampler = Callable[[RngStream, int], np.ndarray]


@dataclass(frozen=True)
class McSnrEstimate:
    snr: float
    mean_norm_sq: float
    mean_sq_norm: float
    n_samples: int
    se_mean_norm_sq: float
    se_snr: float = math.nan
    n_nonfinite: int = 0


@dataclass(frozen=True)
class McVariance:
    mean: np.ndarray
    per_component: np.ndarray
    total: float
    n_samples: int
    n_nonfinite: int = 0


@dataclass
class _Moments:
    """Count, mean and centered cross-product matrix of ``y = [x, |x|^2]``."""

    n: int
    mean: np.ndarray
    m2: np.ndarray
    n_bad: int = 0

    @classmethod
    def of_chunk(cls, x: np.ndarray) -> "_Moments":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        x = x.reshape(x.shape[0], -1)
        good = np.all(np.isfinite(x), axis=1)
        x = x[good]
        n_bad = int((~good).sum())
        with np.errstate(over="ignore"):
            sq = np.sum(x * x, axis=1)
        # rows whose squared norm overflows are as unusable as NaN rows
        ok = np.isfinite(sq)
        n_bad += int((~ok).sum())
        y = np.column_stack([x[ok], sq[ok]])
        n = y.shape[0]
        if n == 0:
            p = y.shape[1]
            return cls(0, np.zeros(p), np.zeros((p, p)), n_bad)
        mean = y.mean(axis=0)
        c = y - mean
        with np.errstate(over="ignore", invalid="ignore"):
            m2 = c.T @ c
        return cls(n, mean, m2, n_bad)

    def merge(self, other: "_Moments") -> "_Moments":
        if other.n == 0:
            return _Moments(self.n, self.mean, self.m2, self.n_bad + other.n_bad)
        if self.n == 0:
            return _Moments(other.n, other.mean, other.m2, self.n_bad + other.n_bad)
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        return _Moments(n, mean, m2, self.n_bad + other.n_bad)


def _accumulate(sampler: Sampler, n: int, rng: RngStream, chunk: int, workers: int) -> _Moments:
    if n < 2:
        raise ValueError("n must be >= 2")
    sizes = [chunk] * (n // chunk) + ([n % chunk] if n % chunk else [])

    def work(k):
        return _Moments.of_chunk(sampler(rng.substream(k), sizes[k]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(k) for k in range(len(sizes))]
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    if total.n < 2:
        raise NonFinite("fewer than two finite samples", count=total.n_bad)
    return total


def mc_snr(sampler: Sampler, n: int, rng: RngStream, chunk: int = DEFAULT_CHUNK, workers: int = 1) -> McSnrEstimate:
    """Estimate ``|E X|^2 / E|X|^2`` from ``n`` draws, with delta-method standard errors."""
    mom = _accumulate(sampler, n, rng, chunk, workers)
    m, s = mom.mean[:-1], np.float64(mom.mean[-1])
    if s == 0.0:
        raise DegenerateAllZero("every sample is the zero vector")
    # heavy-tailed estimators can push the second moments past float range
    with np.errstate(over="ignore", invalid="ignore"):
        cov = mom.m2 / (mom.n - 1)
        mns = np.float64(m @ m)
        snr = float(mns / s)
        grad_mns = 2.0 * m
        se_mns = float(np.sqrt(max(grad_mns @ cov[:-1, :-1] @ grad_mns, 0.0) / mom.n))
        grad = np.append(grad_mns / s, -mns / (s * s))
        se_snr = float(np.sqrt(max(grad @ cov @ grad, 0.0) / mom.n))
    if not math.isfinite(snr):
        raise NonFinite("SNR estimate is not finite", count=mom.n_bad)
    mns, s = float(mns), float(s)
    return McSnrEstimate(
        snr=snr,
        mean_norm_sq=mns,
        mean_sq_norm=s,
        n_samples=mom.n,
        se_mean_norm_sq=se_mns,
        se_snr=se_snr,
        n_nonfinite=mom.n_bad,
    )


def mc_variance(sampler: Sampler, n: int, rng: RngStream, chunk: int = DEFAULT_CHUNK, workers: int = 1) -> McVariance:
    """Unbiased per-component sample variances and their sum."""
    mom = _accumulate(sampler, n, rng, chunk, workers)
    var = np.diag(mom.m2)[:-1] / (mom.n - 1)
    return McVariance(mom.mean[:-1], var, float(var.sum()), mom.n, mom.n_bad)


def mc_mean(sampler: Sampler, n: int, rng: RngStream, chunk: int = DEFAULT_CHUNK, workers: int = 1):
    """Sample mean and its per-component standard error."""
    mom = _accumulate(sampler, n, rng, chunk, workers)
    var = np.diag(mom.m2)[:-1] / (mom.n - 1)
    return mom.mean[:-1], np.sqrt(var / mom.n)


def gradient_sampler(target, q, alpha, estimator="drep", active=None, n_avg: int = 1) -> Sampler:
    """Wrap a batched gradient estimator as a sampler.

    With ``n_avg > 1`` each draw is the mean of ``n_avg`` single-sample estimates.
    """
    samples_fn = ESTIMATORS[estimator] if isinstance(estimator, str) else estimator

    def sampler(rng: RngStream, m: int) -> np.ndarray:
        eps = rng.standard_normal((m * n_avg, q.dim))
        g = samples_fn(target, q, alpha, eps, active)
        if n_avg > 1:
            g = g.reshape(m, n_avg, -1).mean(axis=1)
        return g

    return sampler


@dataclass(frozen=True)
class PathCell:
    step: int
    alpha: float
    status: str
    snr: float = math.nan
    se_snr: float = math.nan
    n_nonfinite: int = 0


def snr_along_path(
    steps: Sequence[int],
    params: Sequence[np.ndarray],
    q_template,
    target,
    alphas: Sequence[float],
    n: int,
    rng: RngStream,
    active: Optional[np.ndarray] = None,
    chunk: int = DEFAULT_CHUNK,
) -> list:
    """SNR of ``g_drep`` at every recorded point of one optimization path, for each alpha.

    Cell failures are recorded as a status string rather than raised.
    """
    if len(params) == 0:
        raise ValueError("path is empty")
    if len(steps) != len(params):
        raise ValueError("steps and params must have the same length")
    rows = []
    for i, (step, flat) in enumerate(zip(steps, params)):
        q = q_template.with_flat(flat)
        for k, alpha in enumerate(alphas):
            sampler = gradient_sampler(target, q, alpha, "drep", active)
            try:
                est = mc_snr(sampler, n, rng.substream(i, k), chunk=chunk)
            except DegenerateAllZero:
                rows.append(PathCell(int(step), float(alpha), "degenerate-zero"))
                continue
            except NonFinite as exc:
                rows.append(PathCell(int(step), float(alpha), "nonfinite", n_nonfinite=exc.count or 0))
                continue
            rows.append(PathCell(int(step), float(alpha), "ok", est.snr, est.se_snr, est.n_nonfinite))
    return rows
