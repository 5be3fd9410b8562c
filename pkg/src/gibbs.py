"""Conjugate Gibbs sampler for the spectrally transformed matrix-variate model.

After rotation by the kinship eigenvectors U, column j of the data obeys

    y~_j = beta x~_j + sqrt(r_j) zeta_j + eps_j,
    zeta_j ~ N_d(0, Sigma),  eps_j ~ N_d(0, Sigma_e),

with Wishart priors on Sigma^-1 and Sigma_e^-1 and a N(0, tau I) prior on
vec(beta). Each iteration updates zeta -> Sigma -> Sigma_e -> beta from their
exact full conditionals (derivations in FEATURES.md).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

import config
from src.errors import (
    ConfigError,
    DimError,
    ImproperPrior,
    IoError,
    MissingData,
    NotSpd,
    NumericalBreakdown,
)
from src.ingest import PhenotypeMatrix
from src.kinship import SpectralKinship
from src.matstats import SpdMatrix, WishartPrior, sample_wishart

logger = logging.getLogger(__name__)

SCALE_MODES = ("identity", "user", "mle")
DRAWS_META_FILE = "draws.yaml"


def covariance_name(prefix: str, a: int, b: int, d: int) -> str:
    """Column name of entry (a, b) (0-based) of a d x d covariance."""
    if d < 10:
        return f"{prefix}_{a + 1}{b + 1}"
    return f"{prefix}_{a + 1}_{b + 1}"


def _parse_pair(suffix: str) -> Tuple[int, int]:
    if "_" in suffix:
        a, b = suffix.split("_")
    elif len(suffix) == 2:
        a, b = suffix
    else:
        raise ValueError(suffix)
    return int(a) - 1, int(b) - 1


@dataclass
class GibbsConfig:
    """
    Sampler protocol and prior settings.

    ``wishart_scale_g`` / ``wishart_scale_e`` are the Wishart scale matrices of
    the priors on Sigma^-1 and Sigma_e^-1; both are the identity in
    ``identity`` mode.
    """

    n_chains: int = config.N_CHAINS
    n_iter: int = config.N_ITER
    burn_in: int = config.BURN_IN
    thin: int = config.THIN
    seed: int = config.SEED
    wishart_scale_mode: str = "identity"
    wishart_scale_g: Optional[SpdMatrix] = None
    wishart_scale_e: Optional[SpdMatrix] = None
    wishart_dof: Optional[float] = config.WISHART_DOF
    coef_prior_variance: float = config.COEF_PRIOR_VARIANCE
    min_kept: int = config.MIN_KEPT_DRAWS

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def validate(self, d: int) -> None:
        if self.n_chains < 1 or self.n_iter < 1 or self.thin < 1:
            raise ConfigError("chains, iterations and thinning must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise ConfigError(f"burn-in {self.burn_in} must lie in [0, {self.n_iter})")
        if self.n_kept < self.min_kept:
            raise ConfigError(
                f"(iter - burnin) / thin = {self.n_kept} kept draws, need at least {self.min_kept}"
            )
        if self.coef_prior_variance <= 0:
            raise ConfigError("coefficient prior variance must be positive")
        if self.wishart_scale_mode not in SCALE_MODES:
            raise ConfigError(f"unknown Wishart scale mode {self.wishart_scale_mode!r}")
        if self.wishart_scale_mode != "identity":
            if self.wishart_scale_g is None or self.wishart_scale_e is None:
                raise ConfigError(f"{self.wishart_scale_mode} mode needs both Wishart scale matrices")
            if self.wishart_scale_g.dim != d or self.wishart_scale_e.dim != d:
                raise DimError(f"Wishart scale matrices must be {d} x {d}")
        if self.dof(d) <= d - 1:
            raise ImproperPrior(f"Wishart degrees of freedom must exceed {d - 1}")

    def dof(self, d: int) -> float:
        return float(d if self.wishart_dof is None else self.wishart_dof)

    def priors(self, d: int) -> Tuple[WishartPrior, WishartPrior]:
        """Wishart priors on (Sigma^-1, Sigma_e^-1)."""
        if self.wishart_scale_mode == "identity":
            scale_g = scale_e = SpdMatrix.identity(d)
        else:
            scale_g, scale_e = self.wishart_scale_g, self.wishart_scale_e
        return WishartPrior(scale_g, self.dof(d)), WishartPrior(scale_e, self.dof(d))

    def echo(self) -> Dict:
        """Plain-data copy for metadata files."""
        out = {
            "n_chains": self.n_chains,
            "n_iter": self.n_iter,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "seed": int(self.seed),
            "wishart_scale_mode": self.wishart_scale_mode,
            "wishart_dof": None if self.wishart_dof is None else float(self.wishart_dof),
            "coef_prior_variance": float(self.coef_prior_variance),
        }
        if self.wishart_scale_g is not None:
            out["wishart_scale_g"] = self.wishart_scale_g.m.tolist()
        if self.wishart_scale_e is not None:
            out["wishart_scale_e"] = self.wishart_scale_e.m.tolist()
        return out


@dataclass(frozen=True, eq=False)
class ModelState:
    beta: np.ndarray
    zeta: np.ndarray
    sigma_g: SpdMatrix
    sigma_e: SpdMatrix


@dataclass(eq=False)
class PosteriorDraws:
    """
    Kept draws of every chain.

    Arrays are indexed (chain, draw, ...): sigma_g and sigma_e are
    (n_chains, n_kept, d, d), beta is (n_chains, n_kept, d, k).
    """

    sigma_g: np.ndarray
    sigma_e: np.ndarray
    beta: np.ndarray
    kept_iters: np.ndarray
    trait_ids: Tuple[str, ...]
    config_echo: Dict = field(default_factory=dict)
    chain_seeds: List[List[int]] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.sigma_g.shape[0]

    @property
    def n_kept(self) -> int:
        return self.sigma_g.shape[1]

    @property
    def n_traits(self) -> int:
        return self.sigma_g.shape[2]

    @property
    def n_covariates(self) -> int:
        return self.beta.shape[3]

    def parameter_names(self) -> List[str]:
        """Column order of the draw files: upper triangles of Sigma, Sigma_e, then beta."""
        d, k = self.n_traits, self.n_covariates
        upper = [(a, b) for a in range(d) for b in range(a, d)]
        names = [covariance_name("sigma_g", a, b, d) for a, b in upper]
        names += [covariance_name("sigma_e", a, b, d) for a, b in upper]
        names += [f"beta_{i + 1}_{c + 1}" for i in range(d) for c in range(k)]
        return names

    def parameter(self, name: str) -> np.ndarray:
        """
        (n_chains, n_kept) draws of one scalar parameter.

        Args:
            name: ``sigma_g_ab``, ``sigma_e_ab`` (1-based trait indices, written
                ``sigma_g_a_b`` once there are ten or more traits) or ``beta_i_c``
        """
        try:
            if name.startswith("beta_"):
                i, c = (int(t) - 1 for t in name[len("beta_"):].split("_"))
                if i >= 0 and c >= 0:
                    return self.beta[:, :, i, c]
            elif name.startswith("sigma_g_") or name.startswith("sigma_e_"):
                a, b = _parse_pair(name[len("sigma_g_"):])
                if 0 <= a < self.n_traits and 0 <= b < self.n_traits:
                    source = self.sigma_g if name.startswith("sigma_g_") else self.sigma_e
                    return source[:, :, a, b]
        except (ValueError, IndexError):
            pass
        raise KeyError(f"unknown parameter {name!r}")

    def posterior_means(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pooled posterior means of (Sigma, Sigma_e, beta)."""
        return (
            self.sigma_g.mean(axis=(0, 1)),
            self.sigma_e.mean(axis=(0, 1)),
            self.beta.mean(axis=(0, 1)),
        )


def transform_data(
    y: PhenotypeMatrix, x: Optional[np.ndarray], sk: SpectralKinship
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rotate phenotypes and covariates by the kinship eigenvectors.

    Args:
        y: Complete d x n phenotypes
        x: k x n covariates, or None for an intercept
        sk: Kinship over the same individuals in the same order

    Returns:
        (Y U, X U)

    Raises:
        MissingData: If any phenotype entry is masked
    """
    if y.has_missing:
        raise MissingData(
            "phenotypes contain missing entries; drop incomplete individuals or "
            "impute them with the predict module first"
        )
    if y.n_samples != sk.n:
        raise DimError(f"{y.n_samples} phenotype columns for a kinship over {sk.n} individuals")
    if tuple(y.sample_ids) != tuple(sk.sample_ids):
        raise DimError("phenotype and kinship sample orders differ")
    if x is None:
        x = np.ones((1, sk.n))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != sk.n:
        raise DimError(f"covariates have {x.shape[1]} columns, expected {sk.n}")
    return sk.rotate(y.values), sk.rotate(x)


def _inverse_small(m: SpdMatrix) -> np.ndarray:
    inv = m.solve(np.eye(m.dim))
    return 0.5 * (inv + inv.T)


def zeta_conditional(
    state: ModelState,
    y_tilde: np.ndarray,
    x_tilde: np.ndarray,
    eigvals: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Means (n x d) and precisions (n x d x d) of the zeta_j full conditionals.

    Precision P_j = Sigma^-1 + r_j Sigma_e^-1, mean P_j^-1 sqrt(r_j) Sigma_e^-1 (y~_j - beta x~_j).
    """
    prec_g = _inverse_small(state.sigma_g)
    prec_e = _inverse_small(state.sigma_e)
    resid = y_tilde - state.beta @ x_tilde
    rhs = (prec_e @ resid) * np.sqrt(eigvals)[None, :]
    precision = prec_g[None, :, :] + eigvals[:, None, None] * prec_e[None, :, :]
    mean = np.linalg.solve(precision, rhs.T[:, :, None])[:, :, 0]
    return mean, precision


def update_zeta(
    state: ModelState,
    y_tilde: np.ndarray,
    x_tilde: np.ndarray,
    eigvals: np.ndarray,
    rng: np.random.Generator,
) -> ModelState:
    """
    Draw every zeta_j from N(V_j sqrt(r_j) Sigma_e^-1 (y~_j - beta x~_j), V_j),
    V_j = (Sigma^-1 + r_j Sigma_e^-1)^-1. Columns are independent given the rest.
    """
    d, n = y_tilde.shape
    try:
        mean, precision = zeta_conditional(state, y_tilde, x_tilde, eigvals)
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"zeta conditional precision is not SPD: {exc}") from exc

    # L^-T g has covariance P^-1
    noise = np.linalg.solve(np.swapaxes(chol, 1, 2), rng.standard_normal((n, d, 1)))[:, :, 0]
    return replace(state, zeta=(mean + noise).T)


def _posterior_wishart_draw(
    prior: WishartPrior,
    scatter: np.ndarray,
    n_obs: int,
    rng: np.random.Generator,
    label: str,
) -> SpdMatrix:
    """
    Draw a covariance whose inverse follows W((V^-1 + S)^-1, nu + n).

    If the posterior scale fails to factorize, jitter of JITTER_SCALE * trace/d
    is added to the scatter once; a second failure aborts.
    """
    d = prior.dim
    inv_scale = _inverse_small(prior.scale)
    for attempt in range(2):
        try:
            post_scale = SpdMatrix(inv_scale + scatter).inverse()
            precision = sample_wishart(WishartPrior(post_scale, prior.dof + n_obs), rng)
            return precision.inverse()
        except NotSpd as exc:
            if attempt == 1:
                raise NumericalBreakdown(f"{label} scatter is not SPD after jitter: {exc}") from exc
            jitter = config.JITTER_SCALE * max(float(np.trace(scatter)), 1.0) / d
            logger.warning("Adding jitter %.3g to the %s scatter matrix", jitter, label)
            scatter = scatter + jitter * np.eye(d)
    raise NumericalBreakdown(f"{label} update failed")


def update_sigma_g(
    state: ModelState, prior: WishartPrior, rng: np.random.Generator
) -> ModelState:
    """Sigma^-1 | zeta ~ W((V^-1 + sum_j zeta_j zeta_j^t)^-1, nu + n)."""
    scatter = state.zeta @ state.zeta.T
    sigma_g = _posterior_wishart_draw(prior, scatter, state.zeta.shape[1], rng, "genetic")
    return replace(state, sigma_g=sigma_g)


def update_sigma_e(
    state: ModelState,
    y_tilde: np.ndarray,
    x_tilde: np.ndarray,
    eigvals: np.ndarray,
    prior: WishartPrior,
    rng: np.random.Generator,
) -> ModelState:
    """Sigma_e^-1 | rest ~ W((V^-1 + sum_j e_j e_j^t)^-1, nu + n), e_j the residuals."""
    resid = y_tilde - state.beta @ x_tilde - state.zeta * np.sqrt(eigvals)[None, :]
    scatter = resid @ resid.T
    sigma_e = _posterior_wishart_draw(prior, scatter, y_tilde.shape[1], rng, "environmental")
    return replace(state, sigma_e=sigma_e)


def beta_conditional(
    state: ModelState,
    y_tilde: np.ndarray,
    x_tilde: np.ndarray,
    eigvals: np.ndarray,
    coef_prior_variance: float,
) -> Tuple[np.ndarray, SpdMatrix]:
    """
    Mean and precision of the vec(beta) full conditional.

    Precision is I / tau + (X~ X~^t kron Sigma_e^-1); the partial residuals
    y~_j - sqrt(r_j) zeta_j play the role of the response. vec stacks columns.
    """
    d, k = state.beta.shape
    if coef_prior_variance <= 0:
        raise ConfigError("coefficient prior variance must be positive")

    partial = y_tilde - state.zeta * np.sqrt(eigvals)[None, :]
    prec_e = _inverse_small(state.sigma_e)
    precision = np.eye(d * k) / coef_prior_variance + np.kron(x_tilde @ x_tilde.T, prec_e)
    rhs = (prec_e @ partial @ x_tilde.T).ravel(order="F")
    try:
        post = SpdMatrix(precision)
    except NotSpd as exc:
        raise NumericalBreakdown(f"beta posterior precision is singular: {exc}") from exc
    return post.solve(rhs), post


def update_beta(
    state: ModelState,
    y_tilde: np.ndarray,
    x_tilde: np.ndarray,
    eigvals: np.ndarray,
    coef_prior_variance: float,
    rng: np.random.Generator,
) -> ModelState:
    """Draw vec(beta) from its normal full conditional and reshape to d x k."""
    d, k = state.beta.shape
    mean, post = beta_conditional(state, y_tilde, x_tilde, eigvals, coef_prior_variance)
    noise = np.linalg.solve(post.chol.T, rng.standard_normal(d * k))
    return replace(state, beta=(mean + noise).reshape((d, k), order="F"))


def initial_state(y: np.ndarray, k: int) -> ModelState:
    """Sigma = Sigma_e = diag(trait variances) / 2, beta = 0, zeta = 0."""
    d, n = y.shape
    variances = y.var(axis=1, ddof=1) if n > 1 else np.ones(d)
    variances = np.where(variances > 0, variances, 1.0)
    half = SpdMatrix(np.diag(0.5 * variances))
    return ModelState(
        beta=np.zeros((d, k)),
        zeta=np.zeros((d, n)),
        sigma_g=half,
        sigma_e=half,
    )


def chain_seed_sequence(seed: int, chain: int) -> np.random.SeedSequence:
    """Seed of one chain; independent of how many chains run."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(chain),))


class GibbsChain:
    """
    One systematic-scan chain over the transformed data.
    """

    def __init__(
        self,
        y_tilde: np.ndarray,
        x_tilde: np.ndarray,
        eigvals: np.ndarray,
        cfg: GibbsConfig,
        init: ModelState,
        chain: int = 0,
    ):
        self.y_tilde = y_tilde
        self.x_tilde = x_tilde
        self.eigvals = np.asarray(eigvals, dtype=np.float64)
        self.cfg = cfg
        self.chain = chain
        self.rng = np.random.default_rng(chain_seed_sequence(cfg.seed, chain))
        self.prior_g, self.prior_e = cfg.priors(y_tilde.shape[0])
        self.state = init
        self.iteration = 0

    def step(self) -> ModelState:
        """Advance one full sweep zeta -> Sigma -> Sigma_e -> beta."""
        self.iteration += 1
        state = update_zeta(self.state, self.y_tilde, self.x_tilde, self.eigvals, self.rng)
        state = update_sigma_g(state, self.prior_g, self.rng)
        state = update_sigma_e(
            state, self.y_tilde, self.x_tilde, self.eigvals, self.prior_e, self.rng
        )
        state = update_beta(
            state, self.y_tilde, self.x_tilde, self.eigvals, self.cfg.coef_prior_variance, self.rng
        )
        self.state = state
        return state

    def run(self) -> Dict[str, np.ndarray]:
        """Run all iterations and return the kept draws."""
        cfg = self.cfg
        d, k = self.state.beta.shape
        kept = cfg.n_kept
        sigma_g = np.empty((kept, d, d))
        sigma_e = np.empty((kept, d, d))
        beta = np.empty((kept, d, k))
        report_every = max(cfg.n_iter // 10, 1)

        slot = 0
        for _ in range(cfg.n_iter):
            try:
                state = self.step()
            except NumericalBreakdown as exc:
                raise NumericalBreakdown(str(exc), chain=self.chain, iteration=self.iteration) from exc
            t = self.iteration
            if t > cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0 and slot < kept:
                sigma_g[slot] = state.sigma_g.m
                sigma_e[slot] = state.sigma_e.m
                beta[slot] = state.beta
                slot += 1
            if t % report_every == 0:
                logger.debug("chain %d: iteration %d/%d", self.chain, t, cfg.n_iter)
        return {"sigma_g": sigma_g, "sigma_e": sigma_e, "beta": beta}


def run_chains(
    y: PhenotypeMatrix,
    x: Optional[np.ndarray],
    sk: SpectralKinship,
    cfg: GibbsConfig,
    threads: int = 1,
) -> PosteriorDraws:
    """
    Run cfg.n_chains independent chains and keep thinned post-burn-in draws.

    Chains are seeded from (cfg.seed, chain index), so results are reproducible
    and do not depend on thread scheduling.
    """
    y_tilde, x_tilde = transform_data(y, x, sk)
    d, k = y_tilde.shape[0], x_tilde.shape[0]
    cfg.validate(d)
    init = initial_state(y.values, k)
    logger.info(
        "Running %d chains x %d iterations (burn-in %d, thin %d) on d=%d, n=%d",
        cfg.n_chains,
        cfg.n_iter,
        cfg.burn_in,
        cfg.thin,
        d,
        sk.n,
    )

    def run_one(chain: int) -> Dict[str, np.ndarray]:
        result = GibbsChain(y_tilde, x_tilde, sk.eigvals, cfg, init, chain).run()
        logger.info("Chain %d finished", chain)
        return result

    chains = range(cfg.n_chains)
    if threads > 1 and cfg.n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, chains))
    else:
        results = [run_one(c) for c in chains]

    kept_iters = cfg.burn_in + cfg.thin * np.arange(1, cfg.n_kept + 1)
    return PosteriorDraws(
        sigma_g=np.stack([r["sigma_g"] for r in results]),
        sigma_e=np.stack([r["sigma_e"] for r in results]),
        beta=np.stack([r["beta"] for r in results]),
        kept_iters=kept_iters,
        trait_ids=tuple(y.trait_ids),
        config_echo=cfg.echo(),
        chain_seeds=[[int(cfg.seed), c] for c in chains],
    )


def wishart_scale_from_ml(fits: Sequence) -> Tuple[SpdMatrix, SpdMatrix]:
    """
    Wishart scales from univariate ML fits: the inverse of diag(sigma_g2) for
    the prior on Sigma^-1 and of diag(sigma_e2) for Sigma_e^-1.

    Zero (boundary) estimates are floored at 1e-6 of the trait's total variance.
    """
    g = np.array([f.sigma_g2 for f in fits], dtype=np.float64)
    e = np.array([f.sigma_e2 for f in fits], dtype=np.float64)
    total = np.where(np.isfinite(g + e) & (g + e > 0), g + e, 1.0)
    g = np.where(np.isfinite(g) & (g > 1e-6 * total), g, 1e-6 * total)
    e = np.where(np.isfinite(e) & (e > 1e-6 * total), e, 1e-6 * total)
    return SpdMatrix(np.diag(1.0 / g)), SpdMatrix(np.diag(1.0 / e))


def save_draws(draws: PosteriorDraws, out_dir: Union[str, Path]) -> List[Path]:
    """
    Write one CSV per chain (``iter`` then every parameter) and draws.yaml.
    """
    out_dir = Path(out_dir)
    names = draws.parameter_names()
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for c in range(draws.n_chains):
            frame = pd.DataFrame({"iter": draws.kept_iters})
            for name in names:
                frame[name] = draws.parameter(name)[c]
            path = out_dir / f"chain_{c + 1}.csv"
            frame.to_csv(path, index=False, float_format=config.FLOAT_FORMAT)
            paths.append(path)
        meta = {
            "trait_ids": list(draws.trait_ids),
            "n_chains": draws.n_chains,
            "n_traits": draws.n_traits,
            "n_covariates": draws.n_covariates,
            "config": draws.config_echo,
            "chain_seeds": draws.chain_seeds,
        }
        with (out_dir / DRAWS_META_FILE).open("w") as handle:
            yaml.safe_dump(meta, handle, sort_keys=False)
    except OSError as exc:
        raise IoError(f"cannot write draws to {out_dir}: {exc}") from exc
    return paths


def load_draws(in_dir: Union[str, Path]) -> PosteriorDraws:
    """Read draws written by save_draws."""
    in_dir = Path(in_dir)
    try:
        with (in_dir / DRAWS_META_FILE).open() as handle:
            meta = yaml.safe_load(handle)
        frames = [
            pd.read_csv(in_dir / f"chain_{c + 1}.csv", float_precision="round_trip")
            for c in range(int(meta["n_chains"]))
        ]
    except OSError as exc:
        raise IoError(f"cannot read draws from {in_dir}: {exc}") from exc

    d, k = int(meta["n_traits"]), int(meta["n_covariates"])
    m, kept = len(frames), len(frames[0])
    sigma_g = np.empty((m, kept, d, d))
    sigma_e = np.empty((m, kept, d, d))
    beta = np.empty((m, kept, d, k))
    for c, frame in enumerate(frames):
        if len(frame) != kept:
            raise DimError("chains have different numbers of kept draws")
        for a in range(d):
            for b in range(a, d):
                sigma_g[c, :, a, b] = sigma_g[c, :, b, a] = frame[covariance_name("sigma_g", a, b, d)]
                sigma_e[c, :, a, b] = sigma_e[c, :, b, a] = frame[covariance_name("sigma_e", a, b, d)]
        for i in range(d):
            for j in range(k):
                beta[c, :, i, j] = frame[f"beta_{i + 1}_{j + 1}"]

    return PosteriorDraws(
        sigma_g=sigma_g,
        sigma_e=sigma_e,
        beta=beta,
        kept_iters=frames[0]["iter"].to_numpy(),
        trait_ids=tuple(meta["trait_ids"]),
        config_echo=meta.get("config", {}),
        chain_seeds=meta.get("chain_seeds", []),
    )
