"""Tests for the SPD wrapper, matrix-normal density and Wishart samplers."""

import numpy as np
import pytest
from scipy import stats

from src.errors import DimError, ImproperPrior, NotSpd, SingularBlock
from src.matstats import (
    SpdMatrix,
    WishartPrior,
    conditional_mvn,
    kron,
    matnorm_logpdf,
    mvn_logpdf,
    sample_inverse_wishart,
    sample_matnorm,
    sample_wishart,
    unvec,
    vec,
)
from tests.helpers import random_spd


class TestSpdMatrix:
    """Validation and cached factorization."""

    def test_rejects_non_square(self):
        with pytest.raises(DimError):
            SpdMatrix(np.ones((2, 3)))

    def test_rejects_asymmetric(self):
        with pytest.raises(NotSpd):
            SpdMatrix(np.array([[2.0, 1.0], [0.0, 2.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(NotSpd):
            SpdMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_nan(self):
        with pytest.raises(NotSpd):
            SpdMatrix(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_arrays_are_read_only(self):
        s = SpdMatrix(np.eye(2))
        with pytest.raises(ValueError):
            s.m[0, 0] = 5.0

    def test_logdet_and_solve(self, rng):
        m = random_spd(rng, 4)
        s = SpdMatrix(m)
        assert s.logdet() == pytest.approx(np.linalg.slogdet(m)[1], rel=1e-12)
        b = rng.standard_normal(4)
        np.testing.assert_allclose(m @ s.solve(b), b, atol=1e-10)
        np.testing.assert_allclose(s.inverse().m @ m, np.eye(4), atol=1e-10)


class TestVectorization:
    def test_vec_index_convention(self):
        x = np.arange(6.0).reshape(2, 3)
        v = vec(x)
        for i in range(2):
            for j in range(3):
                assert v[j * 2 + i] == x[i, j]
        np.testing.assert_array_equal(unvec(v, 2, 3), x)

    def test_kron_block_layout(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.eye(2)
        k = kron(a, b)
        np.testing.assert_array_equal(k[2:, :2], 3.0 * b)


class TestMatrixNormal:
    """The matrix-normal density agrees with the vec form."""

    def test_matches_vec_mvn(self, rng):
        d, n = 3, 5
        a = random_spd(rng, n)
        b = random_spd(rng, d)
        m = rng.standard_normal((d, n))
        x = rng.standard_normal((d, n))
        expected = stats.multivariate_normal(vec(m), np.kron(a, b)).logpdf(vec(x))
        assert matnorm_logpdf(x, m, a, b) == pytest.approx(expected, rel=1e-10)
        assert mvn_logpdf(vec(x), vec(m), np.kron(a, b)) == pytest.approx(expected, rel=1e-10)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimError):
            matnorm_logpdf(np.zeros((2, 3)), np.zeros((2, 3)), np.eye(2), np.eye(2))

    def test_sample_covariance(self, rng):
        a = np.array([[1.0, 0.5], [0.5, 2.0]])
        b = np.array([[1.0, -0.3], [-0.3, 0.5]])
        draws = np.array([vec(sample_matnorm(np.zeros((2, 2)), a, b, rng)) for _ in range(20000)])
        np.testing.assert_allclose(np.cov(draws.T), np.kron(a, b), atol=0.06)

    def test_fixed_seed_is_deterministic(self, rng):
        a, b = random_spd(rng, 3), random_spd(rng, 2)
        m = rng.standard_normal((2, 3))
        first = sample_matnorm(m, a, b, np.random.default_rng(99))
        second = sample_matnorm(m, a, b, np.random.default_rng(99))
        np.testing.assert_array_equal(first, second)

    def test_identity_covariances_give_standard_normals(self, rng):
        draw = sample_matnorm(np.zeros((200, 500)), np.eye(500), np.eye(200), rng)
        assert stats.kstest(draw.ravel(), "norm").pvalue > 0.001


class TestWishart:
    def test_improper_prior_rejected(self):
        with pytest.raises(ImproperPrior):
            WishartPrior(SpdMatrix.identity(3), 1.5)

    def test_mean_is_nu_v(self, rng):
        v = np.array([[0.5, 0.1], [0.1, 0.3]])
        prior = WishartPrior(SpdMatrix(v), 6.0)
        draws = np.array([sample_wishart(prior, rng).m for _ in range(20000)])
        np.testing.assert_allclose(draws.mean(axis=0), 6.0 * v, rtol=0.03, atol=0.01)

    def test_inverse_wishart_mean(self, rng):
        v = np.eye(2) / 10.0
        prior = WishartPrior(SpdMatrix(v), 10.0)
        draws = np.array([sample_inverse_wishart(prior, rng).m for _ in range(20000)])
        # E[W^-1] = V^-1 / (nu - d - 1)
        np.testing.assert_allclose(draws.mean(axis=0), np.eye(2) * 10.0 / 7.0, atol=0.05)

    def test_draws_are_spd(self, rng):
        prior = WishartPrior(SpdMatrix.identity(4), 4.0)
        for _ in range(200):
            assert np.all(np.linalg.eigvalsh(sample_wishart(prior, rng).m) > 0)

    def test_conjugate_posterior_matches_grid(self, rng):
        # scalar precision with prior W(V, nu) and 25 iid N(0, 1/lambda) observations
        v, nu, n = 0.8, 3.0, 25
        x = rng.normal(0.0, 1.5, size=n)
        posterior = WishartPrior(SpdMatrix(np.array([[1.0 / (1.0 / v + x @ x)]])), nu + n)
        analytic = stats.gamma(posterior.dof / 2.0, scale=2.0 * posterior.scale.m[0, 0])

        grid = np.linspace(analytic.ppf(1e-6), analytic.ppf(1 - 1e-6), 200)
        log_post = np.array(
            [
                stats.wishart(df=nu, scale=v).logpdf(lam) + mvn_logpdf(x, np.zeros(n), np.eye(n) / lam)
                for lam in grid
            ]
        )
        brute = np.exp(log_post - log_post.max())
        brute /= brute.sum()
        exact = analytic.pdf(grid)
        exact /= exact.sum()
        assert 0.5 * np.abs(brute - exact).sum() < 0.01

        draws = np.array([sample_wishart(posterior, rng).m[0, 0] for _ in range(20000)])
        grid_mean = float(grid @ brute)
        assert abs(draws.mean() - grid_mean) < 5.0 * draws.std() / np.sqrt(draws.size)


class TestConditionalMvn:
    def test_bivariate_closed_form(self):
        h = np.array([[2.0, 0.8], [0.8, 1.0]])
        mean, cov = conditional_mvn(np.array([1.0, -1.0]), h, [1], np.array([0.5]))
        assert mean[0] == pytest.approx(1.0 + 0.8 * 1.5)
        assert cov[0, 0] == pytest.approx(2.0 - 0.64)

    def test_remaining_coordinates_in_index_order(self, rng):
        h = random_spd(rng, 5)
        mean, cov = conditional_mvn(np.zeros(5), h, [3, 0], np.array([1.0, 2.0]))
        mis = [1, 2, 4]
        obs = [3, 0]
        expected = h[np.ix_(mis, obs)] @ np.linalg.solve(h[np.ix_(obs, obs)], [1.0, 2.0])
        np.testing.assert_allclose(mean, expected, atol=1e-12)
        assert cov.shape == (3, 3)

    def test_bad_index_set(self):
        with pytest.raises(DimError):
            conditional_mvn(np.zeros(2), np.eye(2), [0, 1], np.zeros(2))
        with pytest.raises(DimError):
            conditional_mvn(np.zeros(2), np.eye(2), [], np.zeros(0))

    def test_singular_block(self):
        h = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(SingularBlock):
            conditional_mvn(np.zeros(3), h, [0, 1], np.zeros(2))
