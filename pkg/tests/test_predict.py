"""Tests for BLUP prediction and cross-validation."""

from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from src.errors import ConfigError, DegenerateFold, InsufficientData, MissingData
from src.gibbs import GibbsConfig, run_chains, wishart_scale_from_ml
from src.ingest import PhenotypeMatrix
from src.kinship import spectral_decompose, subset_kinship
from src.predict import (
    BlupModel,
    CONSTANT_PREDICTION,
    assign_folds,
    blup_model_from_univariate,
    blup_predict,
    cross_validate,
    impute_phenotypes,
    rmse_and_corr,
)
from src.reml_baseline import UnivariateFit, fit_traits
from src.simulate import mask_at_random, simulate_dataset
from tests.helpers import phenotypes, random_spd


def _masked(values, mask, sample_ids=None):
    values = np.array(values, dtype=float)
    values[np.asarray(mask)] = np.nan
    return phenotypes(values, sample_ids=sample_ids)


@pytest.fixture
def model(small_kinship, rng):
    return BlupModel(random_spd(rng, 2), random_spd(rng, 2, 0.5), rng.standard_normal((2, 1)), small_kinship)


class TestBlupPredict:
    """Conditional-mean prediction of masked entries."""

    def test_no_mask_is_identity(self, model, rng):
        y = phenotypes(rng.standard_normal((2, 12)), sample_ids=model.sk.sample_ids)
        np.testing.assert_array_equal(blup_predict(model, y), y.values)

    def test_all_masked(self, model):
        y = phenotypes(np.full((2, 12), np.nan), sample_ids=model.sk.sample_ids)
        with pytest.raises(MissingData):
            blup_predict(model, y)

    def test_two_individual_oracle(self):
        # K = I: individuals are independent, so only the other trait informs
        sk = spectral_decompose(np.eye(2))
        sigma_g = np.array([[1.0, 0.4], [0.4, 2.0]])
        sigma_e = np.array([[0.5, 0.1], [0.1, 0.5]])
        mu = np.array([[1.0], [-1.0]])
        m = BlupModel(sigma_g, sigma_e, mu, sk)
        y = _masked([[2.0, 0.7], [0.0, 0.3]], [[False, False], [True, False]])
        total = sigma_g + sigma_e
        expected = -1.0 + total[1, 0] / total[0, 0] * (2.0 - 1.0)
        for method in ("dense", "iterative"):
            out = blup_predict(m, y, method=method)
            assert out[1, 0] == pytest.approx(expected, abs=1e-10)
            np.testing.assert_array_equal(out[:, 1], [0.7, 0.3])

    def test_structured_matches_dense(self, model, rng):
        mask = np.zeros((2, 12), dtype=bool)
        mask[:, [2, 5, 9]] = True
        y = _masked(rng.standard_normal((2, 12)), mask, sample_ids=model.sk.sample_ids)
        structured = blup_predict(model, y, method="structured")
        dense = blup_predict(model, y, method="dense")
        np.testing.assert_allclose(structured, dense, atol=1e-8)
        np.testing.assert_allclose(blup_predict(model, y), dense, atol=1e-8)

    def test_iterative_matches_dense(self, model, rng):
        mask = rng.random((2, 12)) < 0.3
        mask[:, 0] = False
        y = _masked(rng.standard_normal((2, 12)), mask, sample_ids=model.sk.sample_ids)
        np.testing.assert_allclose(
            blup_predict(model, y, method="iterative"),
            blup_predict(model, y, method="dense"),
            atol=1e-6,
        )

    def test_observed_entries_untouched(self, model, rng):
        mask = rng.random((2, 12)) < 0.3
        raw = rng.standard_normal((2, 12))
        y = _masked(raw, mask, sample_ids=model.sk.sample_ids)
        out = blup_predict(model, y)
        np.testing.assert_array_equal(out[~mask], raw[~mask])

    def test_unrelated_individual_predicts_mean(self, rng):
        sk = spectral_decompose(np.diag([1.5, 0.5, 1.0, 1.0]))
        m = BlupModel(random_spd(rng, 2), random_spd(rng, 2), np.zeros((2, 1)), sk)
        mask = np.zeros((2, 4), dtype=bool)
        mask[:, 2] = True
        out = blup_predict(m, _masked(rng.standard_normal((2, 4)), mask))
        np.testing.assert_allclose(out[:, 2], 0.0, atol=1e-12)

    def test_permutation_equivariance(self, small_kinship, rng):
        sigma_g, sigma_e = random_spd(rng, 2), random_spd(rng, 2)
        raw = rng.standard_normal((2, 12))
        mask = rng.random((2, 12)) < 0.25
        mask[:, 0] = False
        perm = rng.permutation(12)
        ids = small_kinship.sample_ids
        permuted_sk = spectral_decompose(
            small_kinship.k[np.ix_(perm, perm)], [ids[i] for i in perm]
        )
        base = blup_predict(
            BlupModel(sigma_g, sigma_e, np.zeros((2, 1)), small_kinship), _masked(raw, mask, ids)
        )
        shuffled = blup_predict(
            BlupModel(sigma_g, sigma_e, np.zeros((2, 1)), permuted_sk),
            _masked(raw[:, perm], mask[:, perm], [ids[i] for i in perm]),
        )
        np.testing.assert_allclose(shuffled, base[:, perm], atol=1e-10)

    def test_structured_rejects_scattered_mask(self, model, rng):
        mask = np.zeros((2, 12), dtype=bool)
        mask[0, 3] = True
        y = _masked(rng.standard_normal((2, 12)), mask, sample_ids=model.sk.sample_ids)
        with pytest.raises(ConfigError):
            blup_predict(model, y, method="structured")

    def test_impute_records_positions(self, model, rng):
        mask = np.zeros((2, 12), dtype=bool)
        mask[1, 4] = True
        y = _masked(rng.standard_normal((2, 12)), mask, sample_ids=model.sk.sample_ids)
        filled = impute_phenotypes(model, y)
        assert not filled.has_missing
        np.testing.assert_array_equal(filled.imputed_mask, mask)
        assert np.isfinite(filled.values).all()


class TestUnivariateModel:
    def test_unidentified_fit_rejected(self, small_kinship):
        fits = [UnivariateFit("a", np.nan, np.nan, np.nan, np.nan, 0.0, np.zeros(1), ("NonIdentifiable",))]
        with pytest.raises(ConfigError):
            blup_model_from_univariate(fits, small_kinship)

    def test_boundary_fit_floored(self, small_kinship):
        fits = [
            UnivariateFit("a", 0.0, 0.0, 2.0, np.nan, 0.0, np.array([0.5]), ("BoundaryEstimate",)),
            UnivariateFit("b", 0.5, 1.0, 1.0, 0.1, 0.0, np.array([-0.5]), ()),
        ]
        m = blup_model_from_univariate(fits, small_kinship)
        assert m.sigma_g.m[0, 0] == pytest.approx(2e-8)
        np.testing.assert_allclose(m.mu[:, 0], [0.5, -0.5])


class TestRmseAndCorr:
    def test_alternating_against_zero(self):
        rmse, corr = rmse_and_corr([[1.0, -1.0, 1.0, -1.0]], [[0.0, 0.0, 0.0, 0.0]])
        assert rmse[0] == pytest.approx(1.0)
        assert np.isnan(corr[0])

    def test_shift_keeps_correlation(self):
        truth = np.array([[0.1, 0.5, -0.3, 2.0]])
        rmse, corr = rmse_and_corr(truth, truth + 2.0)
        assert rmse[0] == pytest.approx(2.0)
        assert corr[0] == pytest.approx(1.0)

    def test_needs_two_values(self):
        with pytest.raises(InsufficientData):
            rmse_and_corr([[1.0]], [[1.0]])


class TestFolds:
    def test_every_individual_assigned(self, small_dataset):
        y = mask_at_random(small_dataset.complete, 0.2, np.random.default_rng(1))
        folds = assign_folds(y, 5, seed=4)
        assert sorted(np.unique(folds)) == [0, 1, 2, 3, 4]
        assert np.bincount(folds).min() >= 11
        np.testing.assert_array_equal(folds, assign_folds(y, 5, seed=4))

    def test_invalid_fold_count(self, small_dataset):
        with pytest.raises(ConfigError):
            assign_folds(small_dataset.complete, 1, seed=0)


class TestCrossValidate:
    def test_reml_report(self, small_dataset):
        y = mask_at_random(small_dataset.complete, 0.15, np.random.default_rng(2))
        report = cross_validate(y, None, small_dataset.kinship, folds=3, estimator="reml", seed=5, impute="drop")
        assert report.fold_rmse.shape == (3, 2)
        assert all(a + b == 60 for a, b in zip(report.n_train, report.n_test))
        rows = report.rows()
        assert [r["metric"] for r in rows] == ["RMSE", "Corr"]
        assert rows[0]["configuration"] == "reml-drop"
        assert set(rows[0]) == {"configuration", "metric", "trait1", "trait2"}
        assert np.all(np.isfinite(report.rmse))

    def test_bayes_with_imputation(self, small_dataset, fast_config):
        y = mask_at_random(small_dataset.complete, 0.1, np.random.default_rng(3))
        report = cross_validate(
            y, None, small_dataset.kinship, folds=2, estimator="bayes", seed=5, impute="blup",
            gibbs_config=fast_config,
        )
        assert report.rows()[0]["configuration"] == "bayes-blup"
        assert np.all(np.isfinite(report.rmse))
        assert report.flags in ((), (CONSTANT_PREDICTION,))

    def test_degenerate_fold(self):
        sk = spectral_decompose(np.eye(4))
        y = PhenotypeMatrix.from_values(np.array([[1.0, 2.0, np.nan, 0.5], [0.3, 0.1, np.nan, 0.2]]))
        with pytest.raises(DegenerateFold):
            cross_validate(y, None, sk, folds=4, estimator="reml", seed=1)

    def test_unknown_estimator(self, small_dataset):
        with pytest.raises(ConfigError):
            cross_validate(small_dataset.complete, None, small_dataset.kinship, estimator="lasso")

    def test_ml_prior_scales_use_training_folds_only(self, small_dataset, fast_config, monkeypatch):
        seen = []

        def recording_run_chains(y_train, x_train, sk_train, cfg, *args, **kwargs):
            seen.append((y_train.sample_ids, cfg))
            return run_chains(y_train, x_train, sk_train, cfg, *args, **kwargs)

        monkeypatch.setattr("src.predict.run_chains", recording_run_chains)
        y = small_dataset.complete
        cfg = replace(fast_config, wishart_scale_mode="mle")
        cross_validate(y, None, small_dataset.kinship, folds=2, estimator="bayes", seed=5, gibbs_config=cfg)

        assert len(seen) == 2
        for sample_ids, used in seen:
            train = [y.sample_ids.index(s) for s in sample_ids]
            assert len(train) < y.n_samples
            fits = fit_traits(y.select_samples(train), None, subset_kinship(small_dataset.kinship, train))
            expected_g, expected_e = wishart_scale_from_ml(fits)
            np.testing.assert_allclose(used.wishart_scale_g.m, expected_g.m)
            np.testing.assert_allclose(used.wishart_scale_e.m, expected_e.m)


@pytest.mark.slow
class TestImputationArm:
    def test_imputing_training_gaps_helps(self):
        cfg = GibbsConfig(n_chains=1, n_iter=1500, burn_in=500, thin=5, seed=2)
        wins = 0
        for rep in range(10):
            data = simulate_dataset(n=300, p=1500, h2=(0.6, 0.6), rg=0.8, miss=0.25, seed=40 + rep)
            score = {}
            for impute in ("drop", "blup"):
                report = cross_validate(
                    data.observed, None, data.kinship, folds=5, estimator="bayes", seed=rep,
                    impute=impute, gibbs_config=cfg,
                )
                score[impute] = np.nanmean(report.correlation)
            wins += score["blup"] >= score["drop"]
        assert stats.binomtest(wins, 10, alternative="greater").pvalue < 0.05
