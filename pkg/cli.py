"""Command-line entry point: kinship -> fit -> herit -> predict, plus cv, reml,
priorsim and simulate.

Every subcommand writes manifest.yaml next to its outputs (command, resolved
flags, seed, SHA-256 of the inputs, version). Exit codes: 0 success, 1 invalid
input or usage, 2 numerical breakdown.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml
from dotenv import dotenv_values

import config
from src.errors import ConfigError, HeritError, MissingData, NumericalBreakdown
from src.gibbs import GibbsConfig, load_draws, run_chains, save_draws, wishart_scale_from_ml
from src.ingest import (
    align_samples,
    drop_incomplete_individuals,
    load_covariates,
    load_genotypes,
    load_phenotypes,
    prepare_genotypes,
    quantile_normalize,
    save_genotypes,
    save_phenotypes,
)
from src.io_utils import write_manifest, write_table
from src.kinship import compute_kinship, load_kinship, rescale_kinship, save_kinship, subset_kinship
from src.matstats import SpdMatrix
from src.posterior import (
    compare_with_univariate,
    correlation_table,
    export_traces,
    heritability,
    summary_table,
)
from src.predict import (
    ESTIMATORS,
    IMPUTE_MODES,
    METHODS,
    blup_model_from_draws,
    blup_model_from_univariate,
    cross_validate,
    impute_phenotypes,
)
from src.priorsim import EffectSizePriorSpec, sample_effect_prior, verify_ridge_equivalence
from src.reml_baseline import fit_traits, load_fits, save_fits
from src.simulate import simulate_dataset, simulate_genotypes

logger = logging.getLogger("herit")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------


def _load_inputs(args):
    """Kinship, aligned phenotypes and covariates for fit/reml/cv/predict."""
    sk = load_kinship(args.kinship)
    y = align_samples(load_phenotypes(args.phenos), sk.sample_ids)
    x = load_covariates(args.covariates, sk.sample_ids) if args.covariates else None
    if getattr(args, "quantile_normalize", False):
        y = quantile_normalize(y)
    return sk, y, x


def _gibbs_config(args, d: int, fits=None) -> GibbsConfig:
    cfg = GibbsConfig(
        n_chains=args.chains,
        n_iter=args.iter,
        burn_in=args.burnin,
        thin=args.thin,
        seed=args.seed,
        wishart_dof=args.wishart_dof,
        coef_prior_variance=args.coef_prior_variance,
    )
    if args.wishart_scale == "identity":
        return cfg
    if args.wishart_scale == "mle":
        # without fits the scales are filled in later, per cross-validation fold
        cfg.wishart_scale_mode = "mle"
        if fits is not None:
            cfg.wishart_scale_g, cfg.wishart_scale_e = wishart_scale_from_ml(fits)
        return cfg
    try:
        matrix = np.loadtxt(args.wishart_scale, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read Wishart scale matrix {args.wishart_scale}: {exc}") from exc
    cfg.wishart_scale_mode = "user"
    cfg.wishart_scale_g = cfg.wishart_scale_e = SpdMatrix(matrix)
    return cfg


def _add_gibbs_flags(sub):
    group = sub.add_argument_group("sampler")
    group.add_argument("--chains", type=int, default=config.N_CHAINS)
    group.add_argument("--iter", type=int, default=config.N_ITER)
    group.add_argument("--burnin", type=int, default=config.BURN_IN)
    group.add_argument("--thin", type=int, default=config.THIN)
    group.add_argument(
        "--wishart-scale",
        default="identity",
        help="identity, mle (from univariate ML fits) or a path to a whitespace d x d matrix",
    )
    group.add_argument("--wishart-dof", type=float, default=config.WISHART_DOF, help="default: number of traits")
    group.add_argument("--coef-prior-variance", type=float, default=config.COEF_PRIOR_VARIANCE)


def _add_data_flags(sub):
    sub.add_argument("--kinship", required=True, help="directory written by the kinship subcommand")
    sub.add_argument(
        "--phenos",
        required=True,
        help="TSV: header 'sample_id <traits>', one row per individual, NA for missing",
    )
    sub.add_argument("--covariates", help="TSV in the phenotype layout; an intercept is always added")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_kinship(args) -> Path:
    genotypes = prepare_genotypes(load_genotypes(args.genotypes, args.format))
    sk = compute_kinship(genotypes, block_size=args.block_size, threads=args.threads)
    save_kinship(sk, args.out)
    write_manifest(args.out, "kinship", vars_of(args), inputs=[args.genotypes])
    return Path(args.out)


def cmd_fit(args) -> Path:
    sk, y, x = _load_inputs(args)
    sk = rescale_kinship(sk, args.sigma2_beta)

    if y.has_missing and args.impute == "drop":
        y, keep = drop_incomplete_individuals(y)
        sk = subset_kinship(sk, keep)
        x = None if x is None else x[:, keep]
    elif y.has_missing and args.impute == "blup":
        imputer = blup_model_from_univariate(fit_traits(y, x, sk, args.threads), sk, x)
        y = impute_phenotypes(imputer, y)
    elif y.has_missing:
        raise MissingData("phenotypes contain NA; rerun with --impute drop or --impute blup")

    fits = None
    if args.wishart_scale == "mle":
        fits = load_fits(args.reml) if args.reml else fit_traits(y, x, sk, args.threads)
    cfg = _gibbs_config(args, y.n_traits, fits)

    draws = run_chains(y, x, sk, cfg, threads=args.threads)
    draws.config_echo["kinship_scale"] = float(sk.scale)
    save_draws(draws, args.out)
    inputs = [args.phenos, args.kinship, args.covariates, args.reml]
    if args.wishart_scale not in ("identity", "mle"):
        inputs.append(args.wishart_scale)
    write_manifest(args.out, "fit", vars_of(args), seed=args.seed, inputs=inputs)
    return Path(args.out)


def cmd_herit(args) -> Path:
    draws = load_draws(args.draws)
    out = Path(args.out)
    herit = heritability(draws)
    write_table(herit.table(), out / "heritability.tsv")
    write_table(summary_table(draws, threads=args.threads), out / "summary.tsv")
    if draws.n_traits > 1:
        write_table(correlation_table(draws), out / "correlation.tsv")
    if args.reml:
        write_table(compare_with_univariate(herit, load_fits(args.reml)), out / "comparison.tsv")
    if args.traces:
        export_traces(draws, out / "traces")
    for trait, s in zip(herit.trait_ids, herit.summaries):
        logger.info("h[%s] = %.4f (sd %.4f, ts-se %.2g)", trait, s.mean, s.sd, s.timeseries_se)
    write_manifest(out, "herit", vars_of(args), inputs=[args.draws, args.reml])
    return out


def cmd_predict(args) -> Path:
    sk, y, x = _load_inputs(args)
    model_path = Path(args.model)
    if model_path.is_dir():
        draws = load_draws(model_path)
        scale = float(draws.config_echo.get("kinship_scale", 1.0))
        sk = rescale_kinship(sk, scale / sk.scale)
        model = blup_model_from_draws(draws, sk, x)
    else:
        model = blup_model_from_univariate(load_fits(model_path), sk, x)

    filled = impute_phenotypes(model, y, method=args.method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_phenotypes(filled, out)
    provenance = pd.DataFrame(filled.imputed_mask.T.astype(int), columns=list(filled.trait_ids))
    provenance.insert(0, "sample_id", list(filled.sample_ids))
    write_table(provenance, out.with_name(out.stem + ".imputed.tsv"))
    write_manifest(out.parent, "predict", vars_of(args), inputs=[args.model, args.kinship, args.phenos, args.covariates])
    return out


def cmd_cv(args) -> Path:
    sk, y, x = _load_inputs(args)
    cfg = _gibbs_config(args, y.n_traits) if args.estimator == "bayes" else None
    out = Path(args.out)
    rows, fold_frames = [], []
    for impute in args.impute:
        report = cross_validate(
            y,
            x,
            sk,
            folds=args.folds,
            estimator=args.estimator,
            seed=args.seed,
            impute=impute,
            gibbs_config=cfg,
            threads=args.threads,
        )
        rows += report.rows()
        fold_frames.append(pd.DataFrame({"sample_id": list(y.sample_ids), "impute": impute, "fold": report.folds + 1}))
    write_table(pd.DataFrame(rows), out / "cv_report.tsv")
    write_table(pd.concat(fold_frames, ignore_index=True), out / "folds.tsv")
    write_manifest(out, "cv", vars_of(args), seed=args.seed, inputs=[args.phenos, args.kinship, args.covariates])
    return out


def cmd_reml(args) -> Path:
    sk, y, x = _load_inputs(args)
    fits = fit_traits(y, x, sk, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fits(fits, out)
    write_manifest(out.parent, "reml", vars_of(args), inputs=[args.phenos, args.kinship, args.covariates])
    return out


def cmd_priorsim(args) -> Path:
    prior_seq, ridge_seq = np.random.SeedSequence(args.seed).spawn(2)
    rng, ridge_rng = np.random.default_rng(prior_seq), np.random.default_rng(ridge_seq)
    dof = float(args.dof if args.dof is not None else args.d)
    spec = EffectSizePriorSpec(
        d=args.d,
        wishart_scale=SpdMatrix.identity(args.d),
        wishart_dof=dof,
        sigma2_beta=args.sigma2_beta,
        p=args.p,
    )
    out = Path(args.out)
    sample = sample_effect_prior(spec, args.draws, rng)
    write_table(sample.table(), out / "effect_hist.tsv")

    if args.genotypes:
        z = prepare_genotypes(load_genotypes(args.genotypes, args.format))
    else:
        z = prepare_genotypes(simulate_genotypes(args.ridge_n, args.ridge_p, rng=ridge_rng))
    check = verify_ridge_equivalence(
        z, SpdMatrix.identity(args.d), args.ridge_draws, ridge_rng, sigma2_beta=args.sigma2_beta
    )
    write_table(pd.DataFrame([check.as_row()]), out / "ridge_check.tsv")
    write_manifest(out, "priorsim", vars_of(args), seed=args.seed, inputs=[args.genotypes])
    return out


def cmd_simulate(args) -> Path:
    h2 = args.h2 * args.d if len(args.h2) == 1 else args.h2
    if len(h2) != args.d:
        raise ConfigError(f"--h2 has {len(h2)} values for d={args.d}")
    miss = args.miss if args.miss else [0.0]
    miss = miss * args.d if len(miss) == 1 else miss
    if len(miss) != args.d:
        raise ConfigError(f"--miss has {len(miss)} values for d={args.d}")

    data = simulate_dataset(args.n, args.p, h2, rg=args.rg, miss=miss, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_genotypes(data.genotypes, out / "genotypes.txt")
    save_phenotypes(data.observed, out / "phenotypes.tsv")
    save_phenotypes(data.complete, out / "phenotypes_complete.tsv")
    truth = {
        "h2": [float(h) for h in data.h2],
        "rg": float(args.rg),
        "sigma_g": data.sigma_g.m.tolist(),
        "sigma_e": data.sigma_e.m.tolist(),
        "missing": data.observed.missingness(),
    }
    with (out / "truth.yaml").open("w") as handle:
        yaml.safe_dump(truth, handle, sort_keys=False)
    write_manifest(out, "simulate", vars_of(args), seed=args.seed)
    return out


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="herit", description="Multi-trait heritability with a Bayesian matrix-variate LMM.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    common = Parser(add_help=False)
    common.add_argument("--config", help="key=value file of flag defaults; command-line flags win")
    common.add_argument("--threads", type=int, default=config.THREADS)
    common.add_argument("--seed", type=int, default=config.SEED)
    noise = common.add_mutually_exclusive_group()
    noise.add_argument("--verbose", action="store_true")
    noise.add_argument("--quiet", action="store_true")

    subs = parser.add_subparsers(dest="command", metavar="command", required=True)

    sub = subs.add_parser(
        "kinship",
        parents=[common],
        help="build K = ZtZ/p and its eigendecomposition",
        description="Writes K.tsv (sample_id header), K.eigen.tsv (eigenvalues, then eigenvectors "
        "one per row) and K.meta.yaml.",
    )
    sub.add_argument("--genotypes", required=True, help="one SNP per row: snp_id v1 ... vn; NA missing")
    sub.add_argument("--format", choices=("dosage", "real"), default="dosage")
    sub.add_argument("--block-size", type=int, default=config.KINSHIP_BLOCK_SIZE)
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_kinship)

    sub = subs.add_parser(
        "fit",
        parents=[common],
        help="run the Gibbs sampler",
        description="Writes chain_<c>.csv (iter, sigma_g_ab, sigma_e_ab, beta_i_k) and draws.yaml.",
    )
    _add_data_flags(sub)
    _add_gibbs_flags(sub)
    sub.add_argument("--impute", choices=("none", "drop", "blup"), default="drop")
    sub.add_argument("--reml", help="univariate fits for --wishart-scale mle")
    sub.add_argument("--sigma2-beta", type=float, default=1.0, help="rescale K by this factor")
    sub.add_argument("--quantile-normalize", action="store_true")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_fit)

    sub = subs.add_parser(
        "herit",
        parents=[common],
        help="summarize draws",
        description="Writes heritability.tsv (trait, mean, sd, naive_se, ts_se, q2.5, q97.5), "
        "summary.tsv (one row per covariance entry) and correlation.tsv.",
    )
    sub.add_argument("--draws", required=True, help="directory written by fit")
    sub.add_argument("--reml", help="univariate fits to compare against")
    sub.add_argument("--traces", action="store_true", help="also export trace and density CSVs")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_herit)

    sub = subs.add_parser(
        "predict",
        parents=[common],
        help="BLUP-impute missing phenotypes",
        description="Writes the completed phenotype TSV and <out>.imputed.tsv (1 = predicted entry).",
    )
    _add_data_flags(sub)
    sub.add_argument("--model", required=True, help="fit output directory or reml TSV")
    sub.add_argument("--method", choices=METHODS, default="auto")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_predict)

    sub = subs.add_parser(
        "cv",
        parents=[common],
        help="cross-validate BLUP predictions",
        description="Writes cv_report.tsv (configuration, metric, one column per trait) and folds.tsv.",
    )
    _add_data_flags(sub)
    _add_gibbs_flags(sub)
    sub.add_argument("--folds", type=int, default=config.CV_FOLDS)
    sub.add_argument("--estimator", choices=ESTIMATORS, default="bayes")
    sub.add_argument("--impute", choices=IMPUTE_MODES, nargs="+", default=["drop", "blup"])
    sub.add_argument("--quantile-normalize", action="store_true")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_cv)

    sub = subs.add_parser(
        "reml",
        parents=[common],
        help="univariate ML heritability per trait",
        description="Writes a TSV with trait, h2, se, sigma_g2, sigma_e2, loglik, flags, beta_*.",
    )
    _add_data_flags(sub)
    sub.add_argument("--quantile-normalize", action="store_true")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_reml)

    sub = subs.add_parser(
        "priorsim",
        parents=[common],
        help="effect-size prior histogram and ridge equivalence check",
        description="Writes effect_hist.tsv (bin_center, density; tails as -inf/inf with their mass) "
        "and ridge_check.tsv (max_dev, mc_se, pass).",
    )
    sub.add_argument("--sigma2-beta", type=float, default=1.0)
    sub.add_argument("--dof", type=float, default=None, help="Wishart degrees of freedom, default d")
    sub.add_argument("--draws", type=int, default=10000)
    sub.add_argument("--d", type=int, default=2)
    sub.add_argument("--p", type=int, default=1, help="effects per prior draw")
    sub.add_argument("--genotypes", help="genotypes for the ridge check; simulated if omitted")
    sub.add_argument("--format", choices=("dosage", "real"), default="dosage")
    sub.add_argument("--ridge-n", type=int, default=10)
    sub.add_argument("--ridge-p", type=int, default=50)
    sub.add_argument("--ridge-draws", type=int, default=100000)
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_priorsim)

    sub = subs.add_parser(
        "simulate",
        parents=[common],
        help="simulate genotypes and phenotypes",
        description="Writes genotypes.txt, phenotypes.tsv (masked), phenotypes_complete.tsv and truth.yaml.",
    )
    sub.add_argument("--n", type=int, required=True)
    sub.add_argument("--p", type=int, required=True)
    sub.add_argument("--d", type=int, default=2)
    sub.add_argument("--h2", type=_floats, required=True)
    sub.add_argument("--rg", type=float, default=0.0)
    sub.add_argument("--miss", type=_floats, default=None)
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_simulate)

    return parser


def vars_of(args) -> Dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _apply_config_file(parser: Parser, argv: Sequence[str]) -> None:
    """Use a --config key=value file as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = argv[0] if argv and not argv[0].startswith("-") else None
    if not known.config or command is None:
        return

    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(command)
    if sub is None:
        return
    try:
        values = dotenv_values(known.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {known.config}: {exc}") from exc

    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.strip().lower().lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            raise ConfigError(f"{known.config}: unknown key {key!r} for {command}")
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            defaults[dest] = [action.type(t) if action.type else t for t in raw.replace(",", " ").split()]
        elif action.type is not None:
            try:
                defaults[dest] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{known.config}: bad value for {key}: {raw!r}") from exc
        else:
            defaults[dest] = raw
        if action.required:
            action.required = False
    sub.set_defaults(**defaults)


def _setup_logging(args) -> None:
    level = config.LOG_LEVEL
    if getattr(args, "verbose", False):
        level = "DEBUG"
    elif getattr(args, "quiet", False):
        level = "WARNING"
    logging.basicConfig(level=level, format=config.LOG_FORMAT, force=True)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except ConfigError as exc:
        sys.stderr.write(f"herit: error: {exc}\n")
        return 1
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)

    _setup_logging(args)
    try:
        args.func(args)
    except NumericalBreakdown as exc:
        logger.error("Numerical breakdown: %s", exc)
        return 2
    except HeritError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(dispatch())
