"""End-to-end runs of the command-line subcommands on a small simulated dataset."""

from pathlib import Path

import pandas as pd
import pytest

from cli import dispatch
from src.io_utils import read_manifest

FAST_FIT = ["--chains", "2", "--iter", "300", "--burnin", "100", "--thin", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> Path:
    """simulate -> kinship, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(
        ["simulate", "--n", "40", "--p", "200", "--d", "2", "--h2", "0.6,0.4", "--rg", "0.3",
         "--miss", "0.1", "--seed", "5", "--out", str(root / "sim")]
    ) == 0
    assert dispatch(
        ["kinship", "--genotypes", str(root / "sim" / "genotypes.txt"), "--out", str(root / "kin")]
    ) == 0
    return root


def _data_flags(root: Path):
    return ["--kinship", str(root / "kin"), "--phenos", str(root / "sim" / "phenotypes.tsv")]


class TestPipeline:
    """simulate -> kinship -> fit -> herit -> predict, plus reml, cv and priorsim."""

    def test_simulate_outputs(self, workspace):
        sim = workspace / "sim"
        for name in ("genotypes.txt", "phenotypes.tsv", "phenotypes_complete.tsv", "truth.yaml", "manifest.yaml"):
            assert (sim / name).exists()
        manifest = read_manifest(sim)
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 5

    def test_kinship_outputs(self, workspace):
        for name in ("K.tsv", "K.eigen.tsv", "K.meta.yaml", "manifest.yaml"):
            assert (workspace / "kin" / name).exists()
        manifest = read_manifest(workspace / "kin")
        assert str(workspace / "sim" / "genotypes.txt") in manifest["inputs"]

    def test_fit_herit_predict(self, workspace):
        fit_dir = workspace / "fit"
        assert dispatch(["fit", *_data_flags(workspace), *FAST_FIT, "--seed", "3", "--out", str(fit_dir)]) == 0
        chain = pd.read_csv(fit_dir / "chain_1.csv")
        assert len(chain) == 100
        assert list(chain.columns[:2]) == ["iter", "sigma_g_11"]
        assert read_manifest(fit_dir)["flags"]["impute"] == "drop"

        herit_dir = workspace / "herit"
        assert dispatch(["herit", "--draws", str(fit_dir), "--traces", "--out", str(herit_dir)]) == 0
        table = pd.read_csv(herit_dir / "heritability.tsv", sep="\t")
        assert list(table["trait"]) == ["trait1", "trait2"]
        assert table["mean"].between(0.0, 1.0).all()
        assert (herit_dir / "summary.tsv").exists()
        assert (herit_dir / "correlation.tsv").exists()
        assert (herit_dir / "traces" / "trace_sigma_g_11.csv").exists()

        out = workspace / "pred" / "completed.tsv"
        assert dispatch(["predict", *_data_flags(workspace), "--model", str(fit_dir), "--out", str(out)]) == 0
        completed = pd.read_csv(out, sep="\t")
        assert not completed.isna().any().any()
        provenance = pd.read_csv(out.with_name("completed.imputed.tsv"), sep="\t")
        assert provenance[["trait1", "trait2"]].to_numpy().sum() == 8

    def test_reml_and_comparison(self, workspace):
        reml = workspace / "reml" / "reml.tsv"
        assert dispatch(["reml", *_data_flags(workspace), "--out", str(reml)]) == 0
        fits = pd.read_csv(reml, sep="\t")
        assert list(fits.columns[:7]) == ["trait", "h2", "se", "sigma_g2", "sigma_e2", "loglik", "flags"]

        fit_dir = workspace / "fit_mle"
        assert dispatch(
            ["fit", *_data_flags(workspace), *FAST_FIT, "--wishart-scale", "mle", "--reml", str(reml),
             "--impute", "blup", "--out", str(fit_dir)]
        ) == 0
        herit_dir = workspace / "herit_mle"
        assert dispatch(["herit", "--draws", str(fit_dir), "--reml", str(reml), "--out", str(herit_dir)]) == 0
        comparison = pd.read_csv(herit_dir / "comparison.tsv", sep="\t")
        assert "univariate_sampling_se" in comparison.columns

        pred = workspace / "pred_reml" / "out.tsv"
        assert dispatch(["predict", *_data_flags(workspace), "--model", str(reml), "--out", str(pred)]) == 0

    def test_cv(self, workspace):
        out = workspace / "cv"
        assert dispatch(
            ["cv", *_data_flags(workspace), "--estimator", "reml", "--folds", "3", "--out", str(out)]
        ) == 0
        report = pd.read_csv(out / "cv_report.tsv", sep="\t")
        assert list(report["configuration"]) == ["reml-drop", "reml-drop", "reml-blup", "reml-blup"]
        assert list(report["metric"]) == ["RMSE", "Corr", "RMSE", "Corr"]
        folds = pd.read_csv(out / "folds.tsv", sep="\t")
        assert len(folds) == 80

    def test_cv_bayes_with_ml_prior_scales(self, workspace):
        out = workspace / "cv_mle"
        assert dispatch(
            ["cv", *_data_flags(workspace), *FAST_FIT, "--estimator", "bayes", "--wishart-scale", "mle",
             "--impute", "blup", "--folds", "2", "--out", str(out)]
        ) == 0
        report = pd.read_csv(out / "cv_report.tsv", sep="\t")
        assert list(report["configuration"]) == ["bayes-blup", "bayes-blup"]

    def test_priorsim(self, workspace):
        out = workspace / "prior"
        assert dispatch(
            ["priorsim", "--draws", "200", "--p", "5", "--ridge-draws", "2000", "--sigma2-beta", "0.003",
             "--out", str(out)]
        ) == 0
        hist = pd.read_csv(out / "effect_hist.tsv", sep="\t")
        assert list(hist.columns) == ["bin_center", "density"]
        ridge = pd.read_csv(out / "ridge_check.tsv", sep="\t")
        assert list(ridge.columns) == ["max_dev", "mc_se", "pass"]


class TestReproducibility:
    def test_rerun_gives_identical_draws(self, workspace):
        first, second = workspace / "rerun1", workspace / "rerun2"
        for out in (first, second):
            assert dispatch(["fit", *_data_flags(workspace), *FAST_FIT, "--seed", "9", "--out", str(out)]) == 0
        for name in ("chain_1.csv", "chain_2.csv", "draws.yaml"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_config_file_supplies_defaults(self, workspace, tmp_path):
        cfg = tmp_path / "fit.env"
        cfg.write_text(
            f"kinship={workspace / 'kin'}\nphenos={workspace / 'sim' / 'phenotypes.tsv'}\n"
            "chains=2\niter=300\nburnin=100\nthin=2\n"
        )
        out = tmp_path / "fit"
        assert dispatch(["fit", "--config", str(cfg), "--thin", "1", "--out", str(out)]) == 0
        flags = read_manifest(out)["flags"]
        assert flags["chains"] == 2
        assert flags["thin"] == 1
        assert len(pd.read_csv(out / "chain_1.csv")) == 200


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert dispatch(["bogus"]) == 1

    def test_missing_required_flag(self):
        assert dispatch(["fit", "--out", "x"]) == 1

    def test_version(self):
        assert dispatch(["--version"]) == 0

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.env"
        cfg.write_text("colour=blue\n")
        assert dispatch(["reml", "--config", str(cfg), "--out", str(tmp_path / "r.tsv")]) == 1

    def test_missing_input_file(self, tmp_path):
        assert dispatch(
            ["reml", "--kinship", str(tmp_path / "nope"), "--phenos", str(tmp_path / "nope.tsv"),
             "--out", str(tmp_path / "r.tsv")]
        ) == 1

    def test_improper_prior(self, workspace, tmp_path):
        code = dispatch(
            ["fit", *_data_flags(workspace), *FAST_FIT, "--wishart-dof", "0.5", "--out", str(tmp_path / "f")]
        )
        assert code == 1
