"""Effect-size prior diagnostics and the ridge-regression equivalence check.

Under the ridge form, SNP effects are beta_z ~ MN(0, sigma2_beta I_p, Sigma_beta)
(columns N_d(0, sigma2_beta Sigma_beta)), and the genetic values G = beta_z Z
have vec(G) ~ N(0, sigma2_beta Z^t Z kron Sigma_beta). With K = Z^t Z / p this
is the mixed model's K kron Sigma exactly when Sigma = p sigma2_beta Sigma_beta.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

import config
from src.errors import ConfigError, DimError, InvalidScale
from src.ingest import GenotypeMatrix
from src.matstats import SpdMatrix, WishartPrior, as_spd, sample_inverse_wishart

logger = logging.getLogger(__name__)

CHUNK = 4096
CHUNK_ENTRIES = 2_000_000


@dataclass(frozen=True)
class EffectSizePriorSpec:
    d: int
    wishart_scale: SpdMatrix
    wishart_dof: float
    sigma2_beta: float = 1.0
    p: int = 1

    def __post_init__(self):
        if self.wishart_scale.dim != self.d:
            raise DimError(f"Wishart scale is {self.wishart_scale.dim} x {self.wishart_scale.dim}, expected d={self.d}")
        if not np.isfinite(self.sigma2_beta) or self.sigma2_beta <= 0:
            raise InvalidScale(f"sigma2_beta must be positive, got {self.sigma2_beta}")
        if self.p < 1:
            raise ConfigError("p must be at least 1")
        WishartPrior(self.wishart_scale, self.wishart_dof)

    @property
    def prior(self) -> WishartPrior:
        return WishartPrior(self.wishart_scale, self.wishart_dof)


@dataclass
class EffectPriorSample:
    """
    Pooled histogram of sampled effect sizes on the fixed grid.

    ``density`` integrates (with the bin width) to the in-grid mass;
    ``underflow`` and ``overflow`` hold the mass outside the grid.
    """

    bin_centers: np.ndarray
    density: np.ndarray
    underflow: float
    overflow: float
    n_effects: int
    effects: Optional[np.ndarray] = field(default=None, repr=False)

    def mass_within(self, radius: float) -> float:
        inside = np.abs(self.bin_centers) <= radius
        return float(np.sum(self.density[inside]) * config.HIST_STEP)

    def table(self) -> pd.DataFrame:
        """bin_center, density rows; the tails follow as -inf / inf with their mass."""
        frame = pd.DataFrame({"bin_center": self.bin_centers, "density": self.density})
        tails = pd.DataFrame({"bin_center": [-np.inf, np.inf], "density": [self.underflow, self.overflow]})
        return pd.concat([frame, tails], ignore_index=True)


def histogram_edges() -> np.ndarray:
    n_bins = int(round((config.HIST_HIGH - config.HIST_LOW) / config.HIST_STEP))
    return np.linspace(config.HIST_LOW, config.HIST_HIGH, n_bins + 1)


def sample_effect_prior(
    spec: EffectSizePriorSpec,
    n_draws: int,
    rng: Optional[np.random.Generator] = None,
    keep_effects: bool = False,
) -> EffectPriorSample:
    """
    Draw Sigma_beta from the inverse-Wishart prior, then p effect columns from
    N_d(0, sigma2_beta Sigma_beta), n_draws times, and histogram every effect.

    Args:
        keep_effects: Also return the (n_draws, d, p) effect array
    """
    if n_draws < 1:
        raise ConfigError("n_draws must be at least 1")
    rng = rng or np.random.default_rng(config.SEED)
    edges = histogram_edges()
    counts = np.zeros(edges.size - 1, dtype=np.int64)
    below = above = 0
    kept = np.empty((n_draws, spec.d, spec.p)) if keep_effects else None
    root = np.sqrt(spec.sigma2_beta)
    prior = spec.prior

    for t in range(n_draws):
        sigma_beta = sample_inverse_wishart(prior, rng)
        effects = root * (sigma_beta.chol @ rng.standard_normal((spec.d, spec.p)))
        flat = effects.ravel()
        counts += np.histogram(flat, bins=edges)[0]
        below += int(np.sum(flat < edges[0]))
        above += int(np.sum(flat > edges[-1]))
        if kept is not None:
            kept[t] = effects

    total = n_draws * spec.d * spec.p
    centers = 0.5 * (edges[:-1] + edges[1:])
    logger.info(
        "Sampled %d effects (sigma2_beta=%g, dof=%g); %.4f of the mass falls outside the grid",
        total,
        spec.sigma2_beta,
        spec.wishart_dof,
        (below + above) / total,
    )
    return EffectPriorSample(
        bin_centers=centers,
        density=counts / (total * config.HIST_STEP),
        underflow=below / total,
        overflow=above / total,
        n_effects=total,
        effects=kept,
    )


def implied_genetic_covariance(sigma_beta, p: int, sigma2_beta: float = 1.0) -> SpdMatrix:
    """Sigma of the mixed model matching a ridge prior: p * sigma2_beta * Sigma_beta."""
    return as_spd(sigma_beta).scaled(p * sigma2_beta)


@dataclass
class RidgeCheck:
    max_dev: float
    mc_se: float
    passed: bool
    mc_cov: np.ndarray = field(repr=False)
    target: np.ndarray = field(repr=False)

    def as_row(self) -> dict:
        return {"max_dev": self.max_dev, "mc_se": self.mc_se, "pass": self.passed}


def verify_ridge_equivalence(
    z: GenotypeMatrix,
    sigma_beta,
    n_draws: int,
    rng: Optional[np.random.Generator] = None,
    sigma2_beta: float = 1.0,
    n_se: float = 5.0,
) -> RidgeCheck:
    """
    Compare the Monte Carlo covariance of vec(G), G = beta_z Z, with
    sigma2_beta Z^t Z kron Sigma_beta.

    Every entry's deviation is measured against its own Monte Carlo SE; the
    check passes when all lie within n_se of them. ``max_dev`` is the largest
    absolute deviation and ``mc_se`` the SE of that entry.
    """
    sigma_beta = as_spd(sigma_beta)
    rng = rng or np.random.default_rng(config.SEED)
    values = np.asarray(z.values, dtype=np.float64)
    p, n = values.shape
    d = sigma_beta.dim
    if n_draws < 2:
        raise ConfigError("n_draws must be at least 2")
    if n > 30 or p > 200:
        logger.warning("Ridge check on n=%d, p=%d is slower than intended", n, p)

    target = sigma2_beta * np.kron(values.T @ values, sigma_beta.m)
    root = np.sqrt(sigma2_beta)
    q = n * d
    sums = np.zeros((q, q))
    sums_sq = np.zeros((q, q))
    done = 0
    while done < n_draws:
        b = min(CHUNK, max(1, CHUNK_ENTRIES // (q * q)), n_draws - done)
        effects = root * np.einsum("ij,bjp->bip", sigma_beta.chol, rng.standard_normal((b, d, p)))
        g = effects @ values  # (b, d, n)
        v = g.transpose(0, 2, 1).reshape(b, q)  # column-stacked vec
        prods = v[:, :, None] * v[:, None, :]
        sums += prods.sum(axis=0)
        sums_sq += (prods**2).sum(axis=0)
        done += b

    mc_cov = sums / n_draws
    mc_var = np.maximum(sums_sq / n_draws - mc_cov**2, 0.0)
    se = np.sqrt(mc_var / n_draws)
    dev = np.abs(mc_cov - target)
    passed = bool(np.all(dev <= n_se * se + 1e-12 * max(1.0, float(np.abs(target).max()))))
    worst = np.unravel_index(np.argmax(dev), dev.shape)
    report = RidgeCheck(float(dev[worst]), float(se[worst]), passed, mc_cov, target)
    logger.info("Ridge check: max deviation %.4g (se %.4g), pass=%s", report.max_dev, report.mc_se, passed)
    return report
