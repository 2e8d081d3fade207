"""Experiment drivers shared by the command line and the acceptance suite.

Each driver returns plain Python results; serialization lives in :mod:`alphavi.cli`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_math import RngStream
from .distributions import DiagonalGaussian, FullRankGaussian, GaussianTarget, make_factorized_gaussian_target
from .errors import DegenerateAllZero, NonFinite
from .estimators import ESTIMATORS
from .models import LogRegTarget, alpha_elbo_estimate, alpha_elbo_grad_samples
from .optimizers import DEFAULT_GRID, RunTrace, SweepResult, run, scale_error, sweep
from .snr_empirical import McSnrEstimate, gradient_sampler, mc_snr, mc_variance
from .snr_theory import (
    SnrStatus,
    SpectralSummary,
    existence_margin,
    snr_factorized_gaussian,
    snr_fullrank_bound,
    snr_fullrank_exact,
    variance_bound_factorized,
)

GAUSS_INIT_SCALE = 2.0


def gauss_scale_sweep(
    d: int,
    alpha: float,
    n_samples: int,
    grid: Sequence[float] = DEFAULT_GRID,
    replications: int = 15,
    steps: int = 1000,
    seed_base: int = 0,
    optimizer: str = "sgd",
    estimator: str = "drep",
    init_scale: float = GAUSS_INIT_SCALE,
    workers: int = 1,
) -> SweepResult:
    """Fit the scales of a mean-zero factorized Gaussian to ``N(0, I_d)``.

    The mean stays frozen at zero; the recorded error is :func:`scale_error`.
    """
    target = make_factorized_gaussian_target(np.zeros(d), np.ones(d))
    q0 = DiagonalGaussian(np.zeros(d), np.full(d, init_scale))
    samples_fn = ESTIMATORS[estimator]
    trainable = ~q0.mean_mask()

    def grad_fn(params, rng):
        q = DiagonalGaussian(params[:d], params[d:])
        g = samples_fn(target, q, alpha, rng.standard_normal((n_samples, d)))
        return g.mean(axis=0)

    def run_fn(step_size, rng):
        return run(
            grad_fn,
            q0.flat(),
            step_size,
            rng,
            steps=steps,
            optimizer=optimizer,
            error_fn=lambda p: scale_error(p[d:]),
            positive=q0.positive_mask(),
            trainable=trainable,
            metadata={"d": d, "alpha": alpha, "n_samples": n_samples, "estimator": estimator},
        )

    return sweep(run_fn, grid, replications, seed_base, workers=workers)


@dataclass(frozen=True)
class LogRegSettings:
    steps: int = 1000
    loss_every: int = 10
    loss_samples: int = 1000
    final_samples: int = 250_000
    init_scale: float = 1.0
    optimizer: str = "sgd"


def final_elbo_score(traces: Sequence[RunTrace]) -> float:
    """Mean final high-precision alpha-ELBO; any aborted replication disqualifies the cell."""
    if any(t.aborted for t in traces):
        return -math.inf
    return float(np.mean([t.metadata["final_elbo"] for t in traces]))


def logreg_run_fn(target: LogRegTarget, alpha: float, n_samples: int, settings: LogRegSettings = LogRegSettings()):
    d = target.dim
    q0 = DiagonalGaussian(np.zeros(d), np.full(d, settings.init_scale))

    def grad_fn(params, rng):
        q = DiagonalGaussian(params[:d], params[d:])
        g = alpha_elbo_grad_samples(target, q, alpha, rng.standard_normal((n_samples, d)))
        # the optimizer descends, so hand it the negated ascent direction
        return -g.mean(axis=0)

    def loss_fn(params, rng):
        q = DiagonalGaussian(params[:d], params[d:])
        return alpha_elbo_estimate(target, q, alpha, settings.loss_samples, rng).value

    def run_fn(step_size, rng):
        trace = run(
            grad_fn,
            q0.flat(),
            step_size,
            rng,
            steps=settings.steps,
            optimizer=settings.optimizer,
            positive=q0.positive_mask(),
            loss_fn=loss_fn,
            loss_every=settings.loss_every,
            metadata={"d": d, "alpha": alpha, "n_samples": n_samples, "dataset": target.dataset.name},
        )
        if not trace.aborted:
            q = DiagonalGaussian(trace.final_params[:d], trace.final_params[d:])
            try:
                est = alpha_elbo_estimate(target, q, alpha, settings.final_samples, rng.substream(2))
            except (NonFinite, FloatingPointError, OverflowError, ValueError):
                trace.metadata["aborted_at"] = settings.steps
            else:
                trace.metadata["final_elbo"] = est.value
                trace.metadata["final_elbo_se"] = est.stderr
        return trace

    return run_fn


def logreg_sweep(
    target: LogRegTarget,
    alpha: float,
    n_samples: int,
    grid: Sequence[float] = DEFAULT_GRID,
    replications: int = 15,
    seed_base: int = 0,
    settings: LogRegSettings = LogRegSettings(),
    workers: int = 1,
) -> SweepResult:
    return sweep(
        logreg_run_fn(target, alpha, n_samples, settings),
        grid,
        replications,
        seed_base,
        score_fn=final_elbo_score,
        maximize=True,
        workers=workers,
    )


def final_elbo_summary(result: SweepResult):
    """Mean and standard error, across replications, of the chosen cell's final alpha-ELBO."""
    cell = result.chosen
    if cell is None:
        return math.nan, math.nan
    vals = np.array([t.metadata["final_elbo"] for t in cell.traces])
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
    return float(vals.mean()), se


def random_spd(d: int, rng: RngStream) -> np.ndarray:
    """``A A^T / d + I/2`` with standard normal ``A``."""
    A = rng.standard_normal((d, d))
    return A @ A.T / d + 0.5 * np.eye(d)


def fullrank_pair(d: int, rng: RngStream):
    """A random target covariance and the Cholesky factor of a second random SPD matrix."""
    sigma_p = random_spd(d, rng.substream(0))
    scale_q = np.linalg.cholesky(random_spd(d, rng.substream(1)))
    return sigma_p, scale_q


def fullrank_q(scale_q: np.ndarray) -> FullRankGaussian:
    return FullRankGaussian(np.zeros(scale_q.shape[0]), scale_q, dense_grad=True)


def snr_path_trace(
    target: LogRegTarget,
    step_size: float,
    steps: int,
    record_every: int,
    rng: RngStream,
    n_samples: int = 1,
    init_scale: float = 1.0,
    optimizer: str = "sgd",
) -> RunTrace:
    """One zero-limit (ELBO) optimization path with parameters kept every ``record_every`` steps."""
    d = target.dim
    q0 = DiagonalGaussian(np.zeros(d), np.full(d, init_scale))

    def grad_fn(params, r):
        q = DiagonalGaussian(params[:d], params[d:])
        return -alpha_elbo_grad_samples(target, q, 0.0, r.standard_normal((n_samples, d))).mean(axis=0)

    return run(
        grad_fn,
        q0.flat(),
        step_size,
        rng,
        steps=steps,
        optimizer=optimizer,
        positive=q0.positive_mask(),
        record_every=record_every,
    )


def template_for(target) -> DiagonalGaussian:
    d = target.dim
    return DiagonalGaussian(np.zeros(d), np.ones(d))


def gauss_initial_error(init_scale: float = GAUSS_INIT_SCALE) -> float:
    return (init_scale - 1.0) ** 2



def lambda_profiles(d: int, lambdas: Sequence[float]):
    """Per-coordinate variance ratios for one grid cell.

    Every value gives an isotropic profile; when ``d > 1`` a mixed profile
    cycling through the values is added.
    """
    profiles = [(f"{lam:g}", np.full(d, float(lam))) for lam in lambdas]
    if d > 1 and len(lambdas) > 1:
        mixed = np.array([lambdas[i % len(lambdas)] for i in range(d)], dtype=np.float64)
        profiles.append(("mixed:" + "/".join(f"{x:g}" for x in mixed), mixed))
    return profiles


REL_TOL = 0.02
SMALL_VALUE = 1e-3
SE_MULTIPLIER = 3.0


def fourth_moment_margin(lambdas, alpha: float) -> float:
    """``min_i 1 + 4 alpha (lambda_i - 1)``: where this is nonpositive, Monte Carlo SNR estimates converge erratically."""
    return existence_margin(lambdas, 2.0 * alpha)


def snr_agreement(theory: float, mc: McSnrEstimate, rel_tol: float = REL_TOL) -> tuple:
    """``(passed, relative_error)``: relative tolerance above ``SMALL_VALUE``, 3 SE below it."""
    rel = abs(mc.snr - theory) / theory
    if theory >= SMALL_VALUE:
        return rel <= rel_tol, rel
    return abs(mc.snr - theory) <= SE_MULTIPLIER * mc.se_snr, rel


@dataclass
class ValidationRow:
    family: str
    d: int
    alpha: float
    lambdas: str
    component: str
    verdict: str
    theory: float = math.nan
    mc: float = math.nan
    mc_se: float = math.nan
    rel_error: float = math.nan
    bound: float = math.nan
    bound_holds: str = ""
    # nonpositive means the MC second-moment estimate itself has infinite variance
    fourth_moment_margin: float = math.nan

    @property
    def failed(self) -> bool:
        return self.verdict == "fail"


def _mc_verdict(report, sampler, n, rng, chunk, rel_tol):
    """Compare a closed-form report to Monte Carlo; returns (verdict, theory, mc, se, rel)."""
    if report.status is SnrStatus.UNDEFINED_INFINITE_VARIANCE:
        return "skipped-undefined", math.nan, math.nan, math.nan, math.nan
    try:
        est = mc_snr(sampler, n, rng, chunk=chunk)
    except DegenerateAllZero:
        ok = report.status is SnrStatus.UNDEFINED_ZERO_ESTIMATOR
        return ("pass" if ok else "fail"), math.nan, 0.0, 0.0, math.nan
    if report.status is SnrStatus.UNDEFINED_ZERO_ESTIMATOR:
        return "fail", math.nan, est.snr, est.se_snr, math.nan
    passed, rel = snr_agreement(report.value, est, rel_tol)
    return ("pass" if passed else "fail"), report.value, est.snr, est.se_snr, rel


def factorized_validation(
    d_list: Sequence[int],
    alphas: Sequence[float],
    lambdas: Sequence[float],
    n: int,
    rng: RngStream,
    theory=snr_factorized_gaussian,
    chunk: int = 100_000,
    rel_tol: float = REL_TOL,
) -> list:
    """Closed-form factorized SNR against Monte Carlo on every grid cell.

    ``theory`` is injectable so a corrupted formula can be shown to fail.
    """
    rows = []
    cell = 0
    for d in d_list:
        for label, lam in lambda_profiles(d, lambdas):
            sigma_q = np.sqrt(lam)
            target = make_factorized_gaussian_target(np.zeros(d), np.ones(d))
            q = DiagonalGaussian(np.zeros(d), sigma_q)
            components = [0] if label[0].isdigit() else range(d)
            for alpha in alphas:
                for j in components:
                    report = theory(np.ones(d), sigma_q, alpha, j)
                    sampler = gradient_sampler(target, q, alpha, "drep", np.array([d + j]))
                    verdict, th, mc, se, rel = _mc_verdict(report, sampler, n, rng.substream(cell), chunk, rel_tol)
                    cell += 1
                    rows.append(ValidationRow(
                        "factorized", d, float(alpha), label, f"scale[{j}]", verdict, th, mc, se, rel,
                        fourth_moment_margin=fourth_moment_margin(lam, alpha),
                    ))
    return rows


def fullrank_validation(
    d_list: Sequence[int],
    alphas: Sequence[float],
    n_pairs: int,
    n: int,
    rng: RngStream,
    chunk: int = 100_000,
    rel_tol: float = REL_TOL,
) -> list:
    """Exact full-rank SNR against Monte Carlo on random SPD pairs, with the bound formula alongside."""
    rows = []
    cell = 0
    for d in d_list:
        for k in range(n_pairs):
            sigma_p, scale_q = fullrank_pair(d, rng.substream(d, k))
            target = GaussianTarget(FullRankGaussian.from_covariance(np.zeros(d), sigma_p))
            q = fullrank_q(scale_q)
            active = ~q.mean_mask()
            spec = SpectralSummary.fullrank(sigma_p, scale_q)
            label = "eig:" + "/".join(f"{x:.4g}" for x in spec.lambdas)
            for alpha in alphas:
                report = snr_fullrank_exact(sigma_p, scale_q, alpha)
                sampler = gradient_sampler(target, q, alpha, "drep", active)
                verdict, th, mc, se, rel = _mc_verdict(report, sampler, n, rng.substream(10_000 + cell), chunk, rel_tol)
                cell += 1
                bound = snr_fullrank_bound(sigma_p, scale_q, alpha)
                b = bound.upper_bound if bound.upper_bound is not None else math.nan
                holds = "" if not (math.isfinite(b) and math.isfinite(th)) else ("yes" if b >= th else "no")
                rows.append(ValidationRow(
                    "fullrank", d, float(alpha), label, f"pair[{k}]", verdict, th, mc, se, rel, b, holds,
                    fourth_moment_margin(spec.lambdas, alpha),
                ))
    return rows


@dataclass
class VarianceRow:
    d: int
    alpha: float
    lambda_: float
    mc_variance: float
    bound: float
    bound_holds: bool


def variance_check(
    d_list: Sequence[int],
    alphas: Sequence[float],
    lambdas: Sequence[float],
    n: int,
    rng: RngStream,
    chunk: int = 100_000,
) -> list:
    """Monte Carlo variance of the first scale component against its closed-form bound (isotropic cells)."""
    rows = []
    cell = 0
    for d in d_list:
        for lam in lambdas:
            sigma_q = np.full(d, math.sqrt(lam))
            target = make_factorized_gaussian_target(np.zeros(d), np.ones(d))
            q = DiagonalGaussian(np.zeros(d), sigma_q)
            for alpha in alphas:
                bound = variance_bound_factorized(np.ones(d), sigma_q, alpha, 0)
                sampler = gradient_sampler(target, q, alpha, "drep", np.array([d]))
                var = mc_variance(sampler, n, rng.substream(cell), chunk=chunk)
                cell += 1
                rows.append(VarianceRow(d, float(alpha), float(lam), var.total, bound, var.total <= bound))
    return rows
