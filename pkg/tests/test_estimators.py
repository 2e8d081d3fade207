import math

import numpy as np
import pytest
from scipy.integrate import quad

from alphavi.core_math import RngStream
from alphavi.distributions import DiagonalGaussian, FullRankGaussian, GaussianTarget, make_factorized_gaussian_target
from alphavi.errors import NonFinite, RegimeUnsupported
from alphavi.estimators import (
    AlphaParam,
    Regime,
    averaged,
    divergence_estimate,
    drep_grad_samples,
    g_drep,
    g_rep,
    log_ratio,
    rep_grad_samples,
)

STD = make_factorized_gaussian_target([0.0], [1.0])
SCALE = np.array([False, True])


def expected_ratio_power(sigma_q, alpha, sigma_p=1.0):
    """E_q[(p/q)^alpha] for 1-d mean-zero Gaussians, by numerical quadrature."""

    def integrand(z):
        log_p = -0.5 * (z / sigma_p) ** 2 - math.log(sigma_p)
        log_q = -0.5 * (z / sigma_q) ** 2 - math.log(sigma_q)
        return math.exp(log_q + alpha * (log_p - log_q)) / math.sqrt(2 * math.pi)

    return quad(integrand, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)[0]


def divergence_gradient(sigma_q, alpha, h=1e-5):
    """d/d sigma_q of D_alpha(N(0,1) || N(0, sigma_q^2)) from the quadrature oracle."""

    def D(s):
        return (expected_ratio_power(s, alpha) - 1.0) / (alpha * (alpha - 1.0))

    return (D(sigma_q + h) - D(sigma_q - h)) / (2 * h)


def mc_mean(samples_fn, target, q, alpha, n, seed, active=SCALE):
    g = samples_fn(target, q, alpha, RngStream(seed).standard_normal((n, q.dim)), active)
    return g.mean(axis=0), g.std(axis=0, ddof=1) / math.sqrt(n)


class TestAlphaParam:
    def test_regimes(self):
        assert AlphaParam.of(0).regime is Regime.ZERO_LIMIT
        assert AlphaParam.of(1.0).regime is Regime.ONE
        assert AlphaParam.of(0.4).regime is Regime.GENERAL
        assert AlphaParam.of(AlphaParam.of(0.4)).value == 0.4


class TestLogRatio:
    def test_equal_densities(self):
        q = DiagonalGaussian([0.3, -1.0], [0.7, 2.0])
        eps = RngStream(0).standard_normal((50, 2))
        assert np.all(log_ratio(GaussianTarget(q), q, eps) == 0.0)

    def test_hand_value(self):
        q = DiagonalGaussian([0.0], [2.0])
        assert log_ratio(STD, q, np.array([0.0])) == pytest.approx(math.log(2.0))

    def test_ratio_power_mean(self):
        q = DiagonalGaussian([0.0], [2.0])
        r = np.exp(0.5 * log_ratio(STD, q, RngStream(1).standard_normal((1_000_000, 1))))
        assert expected_ratio_power(2.0, 0.5) == pytest.approx(0.894427191, rel=1e-9)
        assert abs(r.mean() - 0.894427191) < 3 * r.std() / 1000


class TestDivergence:
    def test_zero_at_equality(self):
        q = DiagonalGaussian([0.0, 1.0], [1.0, 3.0])
        eps = RngStream(2).standard_normal((20, 2))
        assert np.all(divergence_estimate(GaussianTarget(q), q, 0.5, eps) == 0.0)
        assert np.all(divergence_estimate(GaussianTarget(q), q, 0, eps) == 0.0)

    def test_mc_value(self):
        q = DiagonalGaussian([0.0], [2.0])
        v = divergence_estimate(STD, q, 0.5, RngStream(3).standard_normal((1_000_000, 1)))
        assert abs(v.mean() - 0.422291236) < 3 * v.std() / 1000

    def test_kl_limit(self):
        # KL(N(0,4) || N(0,1)) = (4 - 1 - log 4) / 2
        q = DiagonalGaussian([0.0], [2.0])
        v = divergence_estimate(STD, q, 0, RngStream(4).standard_normal((1_000_000, 1)))
        assert abs(v.mean() - (3 - math.log(4)) / 2) < 3 * v.std() / 1000

    def test_alpha_one_unsupported(self):
        with pytest.raises(RegimeUnsupported):
            divergence_estimate(STD, DiagonalGaussian([0.0], [2.0]), 1.0, np.zeros(1))


class TestUnbiased:
    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.9])
    @pytest.mark.parametrize("samples_fn", [rep_grad_samples, drep_grad_samples], ids=["rep", "drep"])
    def test_matches_analytic(self, samples_fn, alpha):
        q = DiagonalGaussian([0.0], [2.0])
        mean, se = mc_mean(samples_fn, STD, q, alpha, 1_000_000, seed=int(alpha * 100))
        assert abs(mean[0] - divergence_gradient(2.0, alpha)) < 3 * se[0]

    def test_closed_form_value(self):
        assert divergence_gradient(2.0, 0.5) == pytest.approx(0.536656315, rel=1e-6)
        mean, se = mc_mean(drep_grad_samples, STD, DiagonalGaussian([0.0], [2.0]), 0.5, 1_000_000, seed=5)
        assert abs(mean[0] - 0.536656315) < 3 * se[0]

    def test_rep_zero_mean_at_optimum(self):
        mean, se = mc_mean(rep_grad_samples, STD, DiagonalGaussian([0.0], [1.0]), 0.5, 200_000, seed=6, active=None)
        assert np.all(np.abs(mean) < 3 * se)

    def test_paired_rep_drep(self):
        q = DiagonalGaussian([0.5, -0.3], [1.5, 0.8])
        target = make_factorized_gaussian_target([0.0, 0.0], [1.0, 1.0])
        eps = RngStream(7).standard_normal((400_000, 2))
        diff = rep_grad_samples(target, q, 0.3, eps) - drep_grad_samples(target, q, 0.3, eps)
        se = diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0])
        assert np.all(np.abs(diff.mean(axis=0)) < 3 * se)


class TestZeroAtOptimum:
    @pytest.mark.parametrize("alpha", [0, 0.4, 1.0, 1.5])
    def test_drep_exactly_zero(self, alpha):
        gen = np.random.default_rng(0)
        for d in (1, 3, 8):
            S = np.linalg.cholesky(np.cov(gen.standard_normal((d, 2 * d + 2))) + 0.1 * np.eye(d))
            q = FullRankGaussian(gen.standard_normal(d), S)
            g = drep_grad_samples(GaussianTarget(q), q, alpha, RngStream(d).standard_normal((500, d)))
            assert np.all(np.linalg.norm(g, axis=1) <= 1e-12)

    def test_rep_not_zero(self):
        q = DiagonalGaussian([0.0, 0.0], [1.3, 0.6])
        g = rep_grad_samples(GaussianTarget(q), q, 0, RngStream(1).standard_normal((100, 2)))
        assert np.max(np.linalg.norm(g, axis=1)) > 1e-6


class TestRegimes:
    def test_rep_rejects_alpha_one(self):
        with pytest.raises(RegimeUnsupported):
            g_rep(STD, DiagonalGaussian([0.0], [2.0]), 1.0, np.zeros(1))

    def test_drep_alpha_one_unbiased(self):
        # at alpha = 1 the gradient is d/dsigma KL(p||q) = 1/sigma - sigma_p^2/sigma^3
        mean, se = mc_mean(drep_grad_samples, STD, DiagonalGaussian([0.0], [2.0]), 1.0, 1_000_000, seed=8)
        assert abs(mean[0] - (0.5 - 1 / 8)) < 3 * se[0]

    @pytest.mark.parametrize("samples_fn", [rep_grad_samples, drep_grad_samples], ids=["rep", "drep"])
    def test_zero_limit_continuity(self, samples_fn):
        gen = np.random.default_rng(1)
        target = make_factorized_gaussian_target([0.2, -0.1, 0.0], [1.0, 0.5, 2.0])
        for _ in range(20):
            q = DiagonalGaussian(gen.standard_normal(3) * 0.3, gen.uniform(0.5, 2.0, 3))
            eps = gen.standard_normal(3)
            g0 = samples_fn(target, q, 0, eps)
            g_small = samples_fn(target, q, 1e-6, eps)
            assert np.linalg.norm(g_small - g0) <= 1e-4 * (1 + np.linalg.norm(g0))

    def test_stl_structure(self):
        # 1-d, p = N(0,1), q = N(0, s^2): STL scale gradient is -(−z + z/s^2) * eps
        s, eps = 1.7, 0.9
        z = s * eps
        q = DiagonalGaussian([0.0], [s])
        stl = g_drep(STD, q, 0, np.array([eps])).values
        np.testing.assert_allclose(stl, [-(-z + z / s**2), -(-z + z / s**2) * eps])
        rep = g_rep(STD, q, 0, np.array([eps])).values
        score = [z / s**2, (z * z - s * s) / s**3]
        np.testing.assert_allclose(rep, stl + np.array(score))


class TestAveraged:
    def test_single_sample_equivalence(self):
        q = DiagonalGaussian([0.0, 0.0], [2.0, 0.5])
        target = make_factorized_gaussian_target([0.0, 0.0], [1.0, 1.0])
        a = averaged(drep_grad_samples, target, q, 0.5, 1, RngStream(3))
        eps = RngStream(3).standard_normal((1, 2))[0]
        np.testing.assert_array_equal(a.values, g_drep(target, q, 0.5, eps).values)
        assert a.n_samples_averaged == 1

    def test_variance_scales_inverse_n(self):
        q = DiagonalGaussian([0.0], [2.0])
        reps = 100_000
        base = None
        for n in (1, 10, 100):
            eps = RngStream(n).standard_normal((reps, n, 1))
            g = drep_grad_samples(STD, q, 0.5, eps.reshape(-1, 1), SCALE).reshape(reps, n).mean(axis=1)
            var = g.var(ddof=1)
            base = var if base is None else base
            assert var * n == pytest.approx(base, rel=0.1)

    def test_zero_stays_zero(self):
        q = DiagonalGaussian([0.0], [1.5])
        for n in (1, 7, 50):
            assert np.all(averaged(drep_grad_samples, GaussianTarget(q), q, 0.5, n, RngStream(n)).values == 0.0)

    def test_overflow_raises(self):
        q = DiagonalGaussian([0.0], [1e3])
        with pytest.raises(NonFinite):
            g_drep(STD, q, 200.0, np.array([0.0]))
        # a narrow q makes log p - log q negative everywhere, so a large negative alpha overflows
        narrow = DiagonalGaussian([0.0], [1e-3])
        with pytest.raises(NonFinite) as info:
            averaged(drep_grad_samples, STD, narrow, -200.0, 5, RngStream(0))
        assert info.value.count >= 1

    def test_active_selection(self):
        q = DiagonalGaussian([0.0, 0.0], [2.0, 0.5])
        target = make_factorized_gaussian_target([0.0, 0.0], [1.0, 1.0])
        eps = np.array([0.3, -1.2])
        full = g_drep(target, q, 0.5, eps).values
        part = g_drep(target, q, 0.5, eps, active=~q.mean_mask())
        np.testing.assert_array_equal(part.values, full[2:])
        assert len(part) == 2
