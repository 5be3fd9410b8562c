"""Univariate maximum-likelihood variance components through the spectral transform.

After rotation by the kinship eigenvectors, observation j of a single trait is
independent normal with variance sigma^2 * (h2 * r_j + 1 - h2). The fixed
effects and sigma^2 have closed-form maximizers for every h2, so only the
one-dimensional profile in h2 is optimized. This is plain ML, not REML.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize

import config
from src.errors import DimError, IoError, MissingData
from src.ingest import PhenotypeMatrix
from src.kinship import SpectralKinship, subset_kinship

logger = logging.getLogger(__name__)

BOUNDARY = "BoundaryEstimate"
NON_IDENTIFIABLE = "NonIdentifiable"
H2_UPPER = 1.0 - config.H2_BOUNDARY_TOL


@dataclass
class UnivariateFit:
    trait_id: str
    h2: float
    sigma_g2: float
    sigma_e2: float
    se_h2: float
    loglik: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    flags: Tuple[str, ...] = ()

    def as_row(self) -> dict:
        row = {
            "trait": self.trait_id,
            "h2": self.h2,
            "se": self.se_h2,
            "sigma_g2": self.sigma_g2,
            "sigma_e2": self.sigma_e2,
            "loglik": self.loglik,
            "flags": ",".join(self.flags),
        }
        for i, b in enumerate(np.atleast_1d(self.beta)):
            row[f"beta_{i + 1}"] = b
        return row


def profile_loglik(
    h2: float,
    y_tilde: np.ndarray,
    x_tilde: np.ndarray,
    eigvals: np.ndarray,
    return_params: bool = False,
):
    """
    ML log-likelihood at h2 with beta and sigma^2 profiled out.

    Args:
        h2: Heritability in [0, 1]
        y_tilde: Rotated trait, length n
        x_tilde: Rotated covariates, k x n
        eigvals: Kinship eigenvalues, length n
        return_params: Also return (beta_hat, sigma2_hat)

    Returns:
        The log-likelihood, or (loglik, beta_hat, sigma2_hat)
    """
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    x_tilde = np.atleast_2d(x_tilde)
    n = y_tilde.size
    weights = h2 * np.asarray(eigvals) + (1.0 - h2)
    if np.any(weights <= 0):
        ll = -np.inf
        return (ll, np.full(x_tilde.shape[0], np.nan), np.nan) if return_params else ll

    xw = x_tilde / weights
    beta, *_ = np.linalg.lstsq(xw @ x_tilde.T, xw @ y_tilde, rcond=None)
    resid = y_tilde - beta @ x_tilde
    sigma2 = float(np.sum(resid**2 / weights) / n)
    if sigma2 <= 0:
        ll = np.inf
    else:
        ll = -0.5 * (n * (np.log(2 * np.pi) + np.log(sigma2) + 1.0) + np.sum(np.log(weights)))
    if return_params:
        return float(ll), beta, sigma2
    return float(ll)


def _refine(objective, grid: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    """Golden-section refinement around the best grid point."""
    best = int(np.argmax(values))
    last = grid.size - 1
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, last)]
    interior = 0 < best < last and values[best] > max(values[best - 1], values[best + 1])
    if interior:
        result = optimize.minimize_scalar(
            lambda h: -objective(h),
            bracket=(lo, grid[best], hi),
            method="golden",
            options={"xtol": config.H2_TOL},
        )
    else:
        result = optimize.minimize_scalar(
            lambda h: -objective(h),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": config.H2_TOL},
        )
    h_opt = float(np.clip(result.x, 0.0, H2_UPPER))
    ll_opt = objective(h_opt)
    if ll_opt < values[best]:
        return float(grid[best]), float(values[best])
    return h_opt, ll_opt


def univariate_ml(
    y_row: np.ndarray,
    x: Optional[np.ndarray],
    sk: SpectralKinship,
    trait_id: str = "trait1",
) -> UnivariateFit:
    """
    Fit one trait by maximum likelihood.

    The profile in h2 is searched on a grid over [0, 1 - 1e-6] and refined by
    golden section to within 1e-8. The SE comes from the finite-difference
    curvature of the profile at the optimum.

    Flags:
        BoundaryEstimate: optimum within 1e-6 of either end; SE is NaN
        NonIdentifiable: the profile is flat in h2 (for example K = I); h2 and
            the variance components are NaN
    """
    y_row = np.asarray(y_row, dtype=np.float64)
    if np.any(np.isnan(y_row)):
        raise MissingData(f"{trait_id}: univariate fit needs a complete trait")
    if y_row.size != sk.n:
        raise DimError(f"{trait_id}: {y_row.size} values for a kinship over {sk.n} individuals")
    x = np.ones((1, sk.n)) if x is None else np.atleast_2d(x)

    y_tilde = sk.rotate(y_row)[0]
    x_tilde = sk.rotate(x)
    eigvals = sk.eigvals

    def objective(h: float) -> float:
        return profile_loglik(h, y_tilde, x_tilde, eigvals)

    grid = np.linspace(0.0, H2_UPPER, config.H2_GRID_POINTS)
    values = np.array([objective(h) for h in grid])

    if np.ptp(values) <= 1e-9 * max(1.0, abs(values.max())):
        ll, beta, sigma2 = profile_loglik(0.5, y_tilde, x_tilde, eigvals, return_params=True)
        logger.warning("%s: likelihood is flat in h2; variance components not identified", trait_id)
        return UnivariateFit(trait_id, np.nan, np.nan, np.nan, np.nan, ll, beta, (NON_IDENTIFIABLE,))

    h2, ll = _refine(objective, grid, values)
    _, beta, sigma2 = profile_loglik(h2, y_tilde, x_tilde, eigvals, return_params=True)

    flags: Tuple[str, ...] = ()
    if h2 <= config.H2_BOUNDARY_TOL or h2 >= H2_UPPER - config.H2_BOUNDARY_TOL:
        flags = (BOUNDARY,)
        se = np.nan
        logger.warning("%s: h2 estimate %.3g is on the boundary", trait_id, h2)
    else:
        step = min(config.H2_CURVATURE_STEP, h2 / 2, (H2_UPPER - h2) / 2)
        curvature = (objective(h2 + step) - 2 * ll + objective(h2 - step)) / step**2
        se = float(np.sqrt(-1.0 / curvature)) if curvature < 0 else np.nan

    logger.info("%s: h2=%.4f (se %.4f), loglik %.4f", trait_id, h2, se, ll)
    return UnivariateFit(
        trait_id=trait_id,
        h2=h2,
        sigma_g2=h2 * sigma2,
        sigma_e2=(1.0 - h2) * sigma2,
        se_h2=se,
        loglik=ll,
        beta=beta,
        flags=flags,
    )


def fit_traits(
    y: PhenotypeMatrix,
    x: Optional[np.ndarray],
    sk: SpectralKinship,
    threads: int = 1,
) -> List[UnivariateFit]:
    """
    Fit every trait separately. Individuals missing a trait are dropped for
    that trait only, with the kinship re-decomposed on the remaining subset.
    """
    x = np.ones((1, sk.n)) if x is None else np.atleast_2d(x)

    def fit_one(i: int) -> UnivariateFit:
        keep = np.flatnonzero(~y.missing_mask[i])
        sub = subset_kinship(sk, keep)
        return univariate_ml(y.values[i, keep], x[:, keep], sub, y.trait_ids[i])

    if threads > 1 and y.n_traits > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fit_one, range(y.n_traits)))
    return [fit_one(i) for i in range(y.n_traits)]


def save_fits(fits: Sequence[UnivariateFit], path: Union[str, Path]) -> None:
    """Write one row per trait: trait, h2, se, sigma_g2, sigma_e2, loglik, flags, beta_*."""
    frame = pd.DataFrame([f.as_row() for f in fits])
    try:
        frame.to_csv(path, sep="\t", index=False, na_rep=config.MISSING_TOKEN, float_format=config.FLOAT_FORMAT)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_fits(path: Union[str, Path]) -> List[UnivariateFit]:
    try:
        frame = pd.read_csv(
            path, sep="\t", dtype={"trait": str, "flags": str}, keep_default_na=False, na_values=[config.MISSING_TOKEN],
            float_precision="round_trip",
        )
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    beta_cols = [c for c in frame.columns if c.startswith("beta_")]
    fits = []
    for _, row in frame.iterrows():
        flags = tuple(f for f in str(row["flags"]).split(",") if f)
        fits.append(
            UnivariateFit(
                trait_id=row["trait"],
                h2=float(row["h2"]),
                sigma_g2=float(row["sigma_g2"]),
                sigma_e2=float(row["sigma_e2"]),
                se_h2=float(row["se"]),
                loglik=float(row["loglik"]),
                beta=row[beta_cols].to_numpy(dtype=np.float64),
                flags=flags,
            )
        )
    return fits
