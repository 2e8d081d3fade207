import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alphavi.core_math import (
    RngStream,
    cholesky,
    frobenius_norm_sq,
    sample_std_normal,
    solve_spd,
    sym_eigenvalues,
    trace,
)
from alphavi.errors import NotPositiveDefinite, NotSquare, NotSymmetric

from conftest import random_spd_matrix


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = sample_std_normal(RngStream(0, 0), 3)
        b = sample_std_normal(RngStream(0, 0), 3)
        np.testing.assert_array_equal(a, b)

    def test_stream_advances(self):
        r = RngStream(0, 0)
        assert not np.array_equal(sample_std_normal(r, 3), sample_std_normal(r, 3))

    def test_substreams_reproducible(self):
        a = RngStream(7).substream(3, 4).standard_normal(5)
        b = RngStream(7).substream(3, 4).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_streams_uncorrelated(self):
        x = RngStream(1, 0).standard_normal(100_000)
        y = RngStream(1, 1).standard_normal(100_000)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.01

    def test_substream_differs_from_parent(self):
        r = RngStream(1)
        x = r.standard_normal(100_000)
        y = r.substream(0).standard_normal(100_000)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.01

    def test_moments(self):
        x = RngStream(2).standard_normal(1_000_000)
        assert abs(x.mean()) < 0.004
        assert abs(x.var() - 1.0) < 0.005

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            RngStream(-1)
        with pytest.raises(ValueError):
            sample_std_normal(RngStream(0), 0)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_two_by_two(self):
        np.testing.assert_allclose(cholesky([[4.0, 2.0], [2.0, 5.0]]), [[2.0, 0.0], [1.0, 2.0]])

    def test_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky([[1.0, 2.0], [2.0, 1.0]])

    def test_pivot_floor(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.diag([1.0, 1e-13]))

    def test_asymmetric(self):
        with pytest.raises(NotSymmetric):
            cholesky([[1.0, 0.5], [0.0, 1.0]])

    def test_reconstruction_random(self):
        gen = np.random.default_rng(42)
        for _ in range(100):
            d = int(gen.integers(1, 33))
            a = random_spd_matrix(gen, d)
            L = cholesky(a)
            assert np.all(np.diag(L) > 0)
            np.testing.assert_array_equal(L, np.tril(L))
            assert np.linalg.norm(L @ L.T - a) <= 1e-10 * np.linalg.norm(a)


class TestEigenvalues:
    def test_identity(self):
        np.testing.assert_allclose(sym_eigenvalues(np.eye(4)), np.ones(4))

    def test_diagonal(self):
        np.testing.assert_allclose(sym_eigenvalues(np.diag([5.0, 2.0])), [2.0, 5.0])

    def test_hand_computed(self):
        np.testing.assert_allclose(sym_eigenvalues([[2.0, 1.0], [1.0, 2.0]]), [1.0, 3.0])

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSymmetric):
            sym_eigenvalues([[1.0, 2.0], [0.0, 1.0]])

    def test_similarity_invariants(self):
        # eigenvalues of S^T inv(P) S must match inv(P) S S^T, checked through trace and determinant
        gen = np.random.default_rng(3)
        for d in (2, 3, 5, 8):
            P = random_spd_matrix(gen, d)
            S = np.linalg.cholesky(random_spd_matrix(gen, d))
            M = S.T @ np.linalg.solve(P, S)
            lam = sym_eigenvalues(0.5 * (M + M.T))
            product = np.linalg.solve(P, S @ S.T)
            assert abs(lam.sum() - np.trace(product)) <= 1e-8 * abs(np.trace(product))
            assert abs(np.prod(lam) - np.linalg.det(product)) <= 1e-8 * abs(np.linalg.det(product))


class TestSolve:
    def test_identity(self):
        b = np.array([[1.0, -2.0], [3.0, 0.5]])
        np.testing.assert_allclose(solve_spd(np.eye(2), b), b)

    def test_diagonal(self):
        np.testing.assert_allclose(solve_spd(np.diag([2.0, 4.0]), [1.0, 1.0]), [0.5, 0.25])

    def test_residual_random(self):
        gen = np.random.default_rng(5)
        a = random_spd_matrix(gen, 5)
        b = gen.standard_normal((5, 3))
        x = solve_spd(a, b)
        assert np.linalg.norm(a @ x - b) <= 1e-8 * np.linalg.norm(b)

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefinite):
            solve_spd([[1.0, 2.0], [2.0, 1.0]], [1.0, 1.0])


class TestNorms:
    def test_zero(self):
        assert frobenius_norm_sq(np.zeros((3, 2))) == 0.0

    def test_values(self):
        assert frobenius_norm_sq([[1, 2], [3, 4]]) == 30.0
        assert trace([[1, 2], [3, 4]]) == 5.0

    def test_trace_square_only(self):
        with pytest.raises(NotSquare):
            trace(np.zeros((2, 3)))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=16))
    @settings(max_examples=50)
    def test_norm_nonnegative(self, values):
        assert frobenius_norm_sq(np.array(values)) >= 0.0
