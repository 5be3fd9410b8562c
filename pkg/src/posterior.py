"""Posterior summaries, Monte Carlo standard errors and convergence diagnostics."""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from statsmodels.tsa.ar_model import AutoReg, ar_select_order

import config
from src.errors import InsufficientSamples, IoError, NeedsMultipleChains
from src.gibbs import PosteriorDraws

logger = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass
class ParameterSummary:
    """Pooled-chain summary of one scalar parameter."""

    name: str
    mean: float
    sd: float
    naive_se: float
    timeseries_se: float
    quantiles: Dict[float, float]
    ess: float
    psrf: float = float("nan")
    n_draws: int = 0
    n_chains: int = 1

    def as_row(self) -> Dict[str, float]:
        row = {
            "parameter": self.name,
            "mean": self.mean,
            "sd": self.sd,
            "naive_se": self.naive_se,
            "ts_se": self.timeseries_se,
        }
        for level, value in self.quantiles.items():
            row[f"q{level * 100:g}"] = value
        row["ess"] = self.ess
        row["psrf"] = self.psrf
        return row


@dataclass
class HeritabilityPosterior:
    """Per-trait summaries of h_i together with the per-draw values."""

    trait_ids: Tuple[str, ...]
    summaries: List[ParameterSummary]
    draws: np.ndarray = field(repr=False)  # (chains, kept, d)

    def means(self) -> np.ndarray:
        return np.array([s.mean for s in self.summaries])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "trait": trait,
                    "mean": s.mean,
                    "sd": s.sd,
                    "naive_se": s.naive_se,
                    "ts_se": s.timeseries_se,
                    "q2.5": s.quantiles[0.025],
                    "q97.5": s.quantiles[0.975],
                }
                for trait, s in zip(self.trait_ids, self.summaries)
            ]
        )


def _as_chains(chains) -> np.ndarray:
    chains = np.asarray(chains, dtype=np.float64)
    if chains.ndim == 1:
        chains = chains[None, :]
    if chains.ndim != 2:
        raise ValueError(f"chains must be (n_chains, n_draws), got shape {chains.shape}")
    return chains


def spectrum0_ar(chain: np.ndarray, max_lag: Optional[int] = None) -> float:
    """
    Spectral density at frequency zero from an autoregressive fit.

    The AR order is chosen by AIC, then S(0) = sigma^2 / (1 - sum(phi))^2.
    A constant chain has S(0) = 0.
    Chains shorter than config.MIN_AR_DRAWS are treated as independent draws.
    """
    chain = np.asarray(chain, dtype=np.float64)
    n = chain.size
    if n < 2 or np.ptp(chain) == 0.0:
        return 0.0
    if n < config.MIN_AR_DRAWS:
        return float(chain.var(ddof=1))
    if max_lag is None:
        max_lag = int(min(n // 4, max(1, round(10 * np.log10(n)))))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        selected = ar_select_order(chain, maxlag=max_lag, ic="aic", trend="c")
        lags = selected.ar_lags
        result = AutoReg(chain, lags=lags if lags else None, trend="c").fit()

    phi = np.asarray(result.params)[1:]
    denom = (1.0 - float(np.sum(phi))) ** 2
    if denom <= 0:
        return float("inf")
    return float(result.sigma2) / denom


def batch_means_se(chain: np.ndarray, n_batches: Optional[int] = None) -> float:
    """Batch-means standard error of the chain mean (batches of ~sqrt(N) draws)."""
    chain = np.asarray(chain, dtype=np.float64)
    n = chain.size
    if n_batches is None:
        n_batches = max(int(np.floor(np.sqrt(n))), 2)
    size = n // n_batches
    if size < 1:
        raise InsufficientSamples(f"{n} draws cannot form {n_batches} batches")
    means = chain[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.sqrt(size * means.var(ddof=1) / n))


def effective_sample_size(chains, s0: Optional[Sequence[float]] = None) -> float:
    """
    Sum over chains of N * var / S(0), capped at the pooled draw count.
    """
    chains = _as_chains(chains)
    if s0 is None:
        s0 = [spectrum0_ar(c) for c in chains]
    total = 0.0
    for chain, density in zip(chains, s0):
        var = chain.var(ddof=0)
        total += chain.size if density == 0.0 else chain.size * var / density
    return float(min(total, chains.size))


def gelman_rubin(chains) -> float:
    """
    Potential scale reduction factor of unpooled chains.

    Within-chain variances use ddof 0, so identical chains give exactly 1.

    Raises:
        NeedsMultipleChains: For fewer than two chains
    """
    chains = _as_chains(chains)
    m, n = chains.shape
    if m < 2:
        raise NeedsMultipleChains("the potential scale reduction factor needs at least two chains")
    within = float(np.mean(chains.var(axis=1)))
    between_over_n = float(np.var(chains.mean(axis=1), ddof=1))
    if within == 0.0:
        return 1.0 if between_over_n == 0.0 else float("inf")
    return float(np.sqrt((within + between_over_n) / within))


def summarize_chains(name: str, chains, min_draws: int = config.MIN_KEPT_DRAWS) -> ParameterSummary:
    """
    Summarize a (n_chains, n_draws) array.

    Mean, sd and quantiles (type-7 interpolation) are pooled over chains. The
    time-series SE combines per-chain spectral densities, sqrt(mean(S0) / N).

    Raises:
        InsufficientSamples: If fewer than min_draws draws are available
    """
    chains = _as_chains(chains)
    m, per_chain = chains.shape
    n_total = chains.size
    if n_total < min_draws:
        raise InsufficientSamples(f"{name}: {n_total} draws, need at least {min_draws}")

    pooled = chains.ravel()
    sd = float(pooled.std(ddof=1)) if n_total > 1 else 0.0
    s0 = np.array([spectrum0_ar(c) for c in chains])
    quantiles = np.quantile(pooled, QUANTILE_LEVELS, method="linear")
    return ParameterSummary(
        name=name,
        mean=float(pooled.mean()),
        sd=sd,
        naive_se=sd / np.sqrt(n_total),
        timeseries_se=float(np.sqrt(np.mean(s0) / n_total)),
        quantiles={level: float(q) for level, q in zip(QUANTILE_LEVELS, quantiles)},
        ess=effective_sample_size(chains, s0),
        psrf=gelman_rubin(chains) if m > 1 else float("nan"),
        n_draws=n_total,
        n_chains=m,
    )


def summarize(draws: PosteriorDraws, param: str) -> ParameterSummary:
    return summarize_chains(param, draws.parameter(param))


def psrf(draws: PosteriorDraws, param: str) -> float:
    return gelman_rubin(draws.parameter(param))


def heritability(draws: PosteriorDraws) -> HeritabilityPosterior:
    """
    Posterior of h_i = Sigma_ii / (Sigma_ii + Sigma_e,ii).

    The ratio is formed per draw and then summarized, so the reported mean is
    the mean of ratios, not the ratio of posterior means.
    Any non-empty draw set is accepted.
    """
    g = np.diagonal(draws.sigma_g, axis1=2, axis2=3)
    e = np.diagonal(draws.sigma_e, axis1=2, axis2=3)
    h = g / (g + e)
    summaries = [
        summarize_chains(f"h_{trait}", h[:, :, i], min_draws=1)
        for i, trait in enumerate(draws.trait_ids)
    ]
    return HeritabilityPosterior(tuple(draws.trait_ids), summaries, h)


def genetic_correlation(
    draws: PosteriorDraws, component: str = "genetic"
) -> Dict[Tuple[str, str], ParameterSummary]:
    """
    Per-draw correlations Sigma_ab / sqrt(Sigma_aa Sigma_bb) for every trait pair.

    Args:
        component: ``genetic`` for Sigma, ``environmental`` for Sigma_e
    """
    if component not in ("genetic", "environmental"):
        raise ValueError(f"unknown component {component!r}")
    cov = draws.sigma_g if component == "genetic" else draws.sigma_e
    sd = np.sqrt(np.diagonal(cov, axis1=2, axis2=3))
    out = {}
    ids = draws.trait_ids
    for a in range(draws.n_traits):
        for b in range(a + 1, draws.n_traits):
            r = np.clip(cov[:, :, a, b] / (sd[:, :, a] * sd[:, :, b]), -1.0, 1.0)
            name = f"r_{component}_{ids[a]}_{ids[b]}"
            out[(ids[a], ids[b])] = summarize_chains(name, r, min_draws=1)
    return out


def correlation_table(draws: PosteriorDraws) -> pd.DataFrame:
    rows = []
    for component in ("genetic", "environmental"):
        for (a, b), s in genetic_correlation(draws, component).items():
            rows.append({"component": component, "trait_a": a, "trait_b": b, **s.as_row()})
    return pd.DataFrame(rows)


def summary_table(draws: PosteriorDraws, threads: int = 1) -> pd.DataFrame:
    """
    One row per covariance entry (upper triangles of Sigma then Sigma_e).
    """
    names = [n for n in draws.parameter_names() if not n.startswith("beta_")]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            summaries = list(pool.map(lambda n: summarize(draws, n), names))
    else:
        summaries = [summarize(draws, n) for n in names]
    return pd.DataFrame([s.as_row() for s in summaries])


def _density_grid(chains: np.ndarray) -> np.ndarray:
    pooled = chains.ravel()
    spread = float(pooled.std()) or 1.0
    return np.linspace(pooled.min() - 3 * spread, pooled.max() + 3 * spread, config.DENSITY_GRID_POINTS)


def export_traces(
    draws: PosteriorDraws,
    out_dir: Union[str, Path],
    params: Optional[Sequence[str]] = None,
) -> List[Path]:
    """
    Write trace_<param>.csv (chain, iter, value) and density_<param>.csv
    (grid, then one Gaussian-KDE column per chain) for each parameter.

    Raises:
        IoError: If the directory cannot be written
    """
    out_dir = Path(out_dir)
    params = list(params) if params is not None else draws.parameter_names()
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in params:
            chains = draws.parameter(name)
            m, kept = chains.shape
            trace = pd.DataFrame(
                {
                    "chain": np.repeat(np.arange(1, m + 1), kept),
                    "iter": np.tile(draws.kept_iters, m),
                    "value": chains.ravel(),
                }
            )
            trace_path = out_dir / f"trace_{name}.csv"
            trace.to_csv(trace_path, index=False, float_format=config.FLOAT_FORMAT)

            grid = _density_grid(chains)
            density = {"grid": grid}
            for c in range(m):
                if np.ptp(chains[c]) > 0:
                    density[f"chain_{c + 1}"] = stats.gaussian_kde(chains[c])(grid)
                else:
                    density[f"chain_{c + 1}"] = np.full_like(grid, np.nan)
            density_path = out_dir / f"density_{name}.csv"
            pd.DataFrame(density).to_csv(density_path, index=False, float_format=config.FLOAT_FORMAT)
            written += [trace_path, density_path]
    except OSError as exc:
        raise IoError(f"cannot write traces to {out_dir}: {exc}") from exc
    logger.info("Exported traces for %d parameters to %s", len(params), out_dir)
    return written


def load_trace(path: Union[str, Path]) -> np.ndarray:
    """Read a trace CSV back into a (n_chains, n_draws) array."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except OSError as exc:
        raise IoError(f"cannot read trace {path}: {exc}") from exc
    frame = frame.sort_values(["chain", "iter"], kind="stable")
    n_chains = frame["chain"].nunique()
    return frame["value"].to_numpy().reshape(n_chains, -1)


def compare_with_univariate(herit: HeritabilityPosterior, fits: Sequence) -> pd.DataFrame:
    """
    Joint posterior of h next to univariate ML estimates.

    The joint time-series SE is Monte Carlo error of the posterior mean; the
    univariate SE is the sampling SE of the ML estimator. Both are reported,
    labelled by kind.
    """
    by_trait = {f.trait_id: f for f in fits}
    rows = []
    for trait, s in zip(herit.trait_ids, herit.summaries):
        fit = by_trait.get(trait)
        rows.append(
            {
                "trait": trait,
                "joint_mean": s.mean,
                "joint_posterior_sd": s.sd,
                "joint_mc_se": s.timeseries_se,
                "univariate_h2": np.nan if fit is None else fit.h2,
                "univariate_sampling_se": np.nan if fit is None else fit.se_h2,
                "univariate_flags": "" if fit is None else ",".join(fit.flags),
            }
        )
    return pd.DataFrame(rows)
