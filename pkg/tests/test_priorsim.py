"""Tests for effect-size prior sampling and the ridge equivalence check."""

import numpy as np
import pytest
from scipy import stats

from src.errors import DimError, ImproperPrior, InvalidScale
from src.ingest import prepare_genotypes
from src.matstats import SpdMatrix
from src.priorsim import (
    EffectSizePriorSpec,
    histogram_edges,
    implied_genetic_covariance,
    sample_effect_prior,
    verify_ridge_equivalence,
)
from src.simulate import simulate_genotypes
from tests.helpers import random_spd


@pytest.fixture
def genotypes(rng):
    return prepare_genotypes(simulate_genotypes(10, 50, rng=rng))


class TestPriorSpec:
    def test_dimension_mismatch(self):
        with pytest.raises(DimError):
            EffectSizePriorSpec(d=2, wishart_scale=SpdMatrix.identity(3), wishart_dof=4.0)

    def test_invalid_sigma2_beta(self):
        with pytest.raises(InvalidScale):
            EffectSizePriorSpec(d=1, wishart_scale=SpdMatrix.identity(1), wishart_dof=2.0, sigma2_beta=0.0)

    def test_improper_dof(self):
        with pytest.raises(ImproperPrior):
            EffectSizePriorSpec(d=3, wishart_scale=SpdMatrix.identity(3), wishart_dof=1.0)


class TestSampleEffectPrior:
    """Marginal effect-size distribution under the inverse-Wishart prior."""

    def test_tiny_scale_collapses_to_zero(self, rng):
        spec = EffectSizePriorSpec(2, SpdMatrix.identity(2), 2.0, sigma2_beta=1e-12, p=5)
        sample = sample_effect_prior(spec, 2000, rng)
        assert sample.mass_within(0.1) > 0.999
        assert sample.n_effects == 2000 * 2 * 5

    def test_heavy_tails(self, rng):
        spec = EffectSizePriorSpec(1, SpdMatrix.identity(1), 2.0, p=10)
        sample = sample_effect_prior(spec, 10000, rng, keep_effects=True)
        assert sample.effects.shape == (10000, 1, 10)
        assert stats.kurtosis(sample.effects.ravel(), fisher=False) > 3.0

    def test_small_effect_variance_concentrates_mass(self, rng):
        narrow = EffectSizePriorSpec(2, SpdMatrix.identity(2), 2.0, sigma2_beta=0.003, p=20)
        wide = EffectSizePriorSpec(2, SpdMatrix.identity(2), 2.0, sigma2_beta=1.0, p=20)
        assert sample_effect_prior(narrow, 2000, rng).mass_within(0.1) > sample_effect_prior(
            wide, 2000, rng
        ).mass_within(0.1)

    def test_histogram_accounts_for_all_mass(self, rng):
        spec = EffectSizePriorSpec(2, SpdMatrix.identity(2), 2.0, p=10)
        sample = sample_effect_prior(spec, 3000, rng)
        total = sample.density.sum() * 0.01 + sample.underflow + sample.overflow
        assert total == pytest.approx(1.0, abs=1e-9)
        table = sample.table()
        assert len(table) == histogram_edges().size - 1 + 2
        assert table["bin_center"].iloc[-1] == np.inf

    def test_large_dof_concentrates_on_target(self, rng):
        sigma0 = np.array([[1.0, 0.3], [0.3, 0.5]])
        nu = 1e4
        spec = EffectSizePriorSpec(2, SpdMatrix(np.linalg.inv(sigma0) / nu), nu, sigma2_beta=0.5, p=5)
        sample = sample_effect_prior(spec, 4000, rng, keep_effects=True)
        columns = sample.effects.transpose(0, 2, 1).reshape(-1, 2)
        mc = columns.T @ columns / columns.shape[0]
        target = 0.5 * sigma0
        n = columns.shape[0]
        se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
        assert np.all(np.abs(mc - target) < 5.0 * se)

    def test_seeded_runs_agree(self):
        spec = EffectSizePriorSpec(2, SpdMatrix.identity(2), 3.0, p=4)
        first = sample_effect_prior(spec, 500, np.random.default_rng(1))
        second = sample_effect_prior(spec, 500, np.random.default_rng(1))
        np.testing.assert_array_equal(first.density, second.density)


class TestRidgeEquivalence:
    def test_monte_carlo_matches_kronecker_target(self, genotypes, rng):
        report = verify_ridge_equivalence(genotypes, np.eye(2), 100_000, rng)
        assert report.passed
        z = genotypes.values
        np.testing.assert_allclose(report.target, np.kron(z.T @ z, np.eye(2)))

    def test_target_scales_with_sigma2_beta(self, genotypes, rng):
        sigma_beta = random_spd(rng, 2)
        unit = verify_ridge_equivalence(genotypes, sigma_beta, 2000, rng)
        scaled = verify_ridge_equivalence(genotypes, sigma_beta, 2000, rng, sigma2_beta=0.25)
        np.testing.assert_allclose(scaled.target, 0.25 * unit.target, rtol=1e-12)

    def test_single_snp_scalar_case(self, rng):
        z = prepare_genotypes(simulate_genotypes(6, 1, rng=rng))
        report = verify_ridge_equivalence(z, np.eye(1), 50_000, rng)
        np.testing.assert_allclose(np.diag(report.target), z.values[0] ** 2)
        assert report.passed

    def test_report_row(self, genotypes, rng):
        row = verify_ridge_equivalence(genotypes, np.eye(1), 500, rng).as_row()
        assert set(row) == {"max_dev", "mc_se", "pass"}


class TestImpliedCovariance:
    def test_mixed_model_matches_ridge_form(self, rng):
        for _ in range(10):
            n, p, d = 6, int(rng.integers(5, 40)), 3
            z = rng.standard_normal((p, n))
            k = z.T @ z / p
            sigma_beta = random_spd(rng, d)
            sigma2_beta = float(rng.uniform(0.01, 2.0))
            sigma = implied_genetic_covariance(sigma_beta, p, sigma2_beta)
            np.testing.assert_allclose(
                np.kron(k, sigma.m), sigma2_beta * np.kron(z.T @ z, sigma_beta), rtol=1e-10, atol=1e-10
            )
