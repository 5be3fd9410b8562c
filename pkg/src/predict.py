"""BLUP prediction of missing phenotypes and cross-validation of the predictions.

vec(Y) ~ N(vec(beta X), H) with H = K kron Sigma + I kron Sigma_e, and missing
entries are predicted by their conditional mean given the observed ones.
Three solvers share that definition:

    structured  individualwise missingness; K_OO is eigendecomposed so H_OO
                splits into d x d blocks
    dense       builds H explicitly (nd <= DENSE_BLUP_MAX_DIM)
    iterative   conjugate gradients on H_OO with a Kronecker matvec
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, cg
from sklearn.model_selection import StratifiedKFold

import config
from src.errors import (
    ConfigError,
    DegenerateFold,
    DimError,
    InsufficientData,
    MissingData,
    NotSpd,
    NumericalBreakdown,
    SingularBlock,
)
from src.gibbs import GibbsConfig, PosteriorDraws, run_chains, wishart_scale_from_ml
from src.ingest import PhenotypeMatrix, drop_incomplete_individuals
from src.kinship import SpectralKinship, subset_kinship
from src.matstats import SpdMatrix, as_spd, conditional_mvn
from src.reml_baseline import UnivariateFit, fit_traits

logger = logging.getLogger(__name__)

METHODS = ("auto", "structured", "dense", "iterative")
ESTIMATORS = ("bayes", "reml")
IMPUTE_MODES = ("drop", "blup")
CONSTANT_PREDICTION = "ConstantPrediction"


@dataclass(eq=False)
class BlupModel:
    """
    Point estimates of the model plus the kinship they apply to.

    ``x`` defaults to an intercept row; ``mu`` is beta @ x (d x n).
    """

    sigma_g: SpdMatrix
    sigma_e: SpdMatrix
    beta: np.ndarray
    sk: SpectralKinship
    x: Optional[np.ndarray] = None
    mu: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sigma_g, self.sigma_e = as_spd(self.sigma_g), as_spd(self.sigma_e)
        d, n = self.sigma_g.dim, self.sk.n
        if self.x is None:
            self.x = np.ones((1, n))
        self.x = np.atleast_2d(self.x)
        self.beta = np.atleast_2d(self.beta)
        if self.sigma_e.dim != d or self.x.shape[1] != n or self.beta.shape != (d, self.x.shape[0]):
            raise DimError(
                f"model does not conform: d={d}, n={n}, beta {self.beta.shape}, x {self.x.shape}"
            )
        # H is SPD iff every r_j * Sigma + Sigma_e is
        blocks = self.sk.eigvals[:, None, None] * self.sigma_g.m + self.sigma_e.m
        try:
            np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError as exc:
            raise NotSpd(f"H = K kron Sigma + I kron Sigma_e is not SPD: {exc}") from exc
        self.mu = self.beta @ self.x

    @property
    def n_traits(self) -> int:
        return self.sigma_g.dim

    def dense_covariance(self) -> np.ndarray:
        """H as an explicit nd x nd matrix."""
        d, n = self.n_traits, self.sk.n
        if n * d > config.DENSE_BLUP_MAX_DIM:
            raise DimError(f"dense H of dimension {n * d} exceeds {config.DENSE_BLUP_MAX_DIM}")
        return np.kron(self.sk.k, self.sigma_g.m) + np.kron(np.eye(n), self.sigma_e.m)

    def covariance_matvec(self, a: np.ndarray) -> np.ndarray:
        """H vec(A) for a d x n matrix A, returned as a d x n matrix."""
        return self.sigma_g.m @ a @ self.sk.k + self.sigma_e.m @ a


def _is_individualwise(mask: np.ndarray) -> bool:
    return bool(np.all(mask.all(axis=0) | ~mask.any(axis=0)))


def _predict_structured(model: BlupModel, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    observed = np.flatnonzero(~mask.any(axis=0))
    missing = np.flatnonzero(mask.all(axis=0))
    k = model.sk.k
    s, v = linalg.eigh(k[np.ix_(observed, observed)])
    s = np.clip(s, 0.0, None)

    resid = (values[:, observed] - model.mu[:, observed]) @ v
    blocks = s[:, None, None] * model.sigma_g.m + model.sigma_e.m
    try:
        a_rot = np.linalg.solve(blocks, resid.T[:, :, None])[:, :, 0].T
    except np.linalg.LinAlgError as exc:
        raise SingularBlock(f"observed covariance block is singular: {exc}") from exc
    weights = a_rot @ v.T

    out = values.copy()
    out[:, missing] = model.mu[:, missing] + model.sigma_g.m @ weights @ k[np.ix_(observed, missing)]
    return out


def _predict_dense(model: BlupModel, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    flat_mask = mask.ravel(order="F")
    flat = values.ravel(order="F").copy()
    obs = np.flatnonzero(~flat_mask)
    mean, _ = conditional_mvn(model.mu.ravel(order="F"), model.dense_covariance(), obs, flat[obs])
    flat[flat_mask] = mean
    return flat.reshape(values.shape, order="F")


def _predict_iterative(model: BlupModel, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    d, n = values.shape
    flat_mask = mask.ravel(order="F")
    obs = np.flatnonzero(~flat_mask)

    def embed(v: np.ndarray) -> np.ndarray:
        full = np.zeros(d * n)
        full[obs] = v
        return full.reshape((d, n), order="F")

    def matvec(v: np.ndarray) -> np.ndarray:
        return model.covariance_matvec(embed(v)).ravel(order="F")[obs]

    operator = LinearOperator((obs.size, obs.size), matvec=matvec, dtype=np.float64)
    rhs = (values - model.mu).ravel(order="F")[obs]
    solution, info = cg(operator, rhs, rtol=config.CG_RTOL, atol=0.0, maxiter=10 * obs.size)
    if info != 0:
        raise NumericalBreakdown(f"conjugate gradients did not converge (info={info})")

    fitted = model.covariance_matvec(embed(solution)).ravel(order="F")
    flat = values.ravel(order="F").copy()
    flat[flat_mask] = model.mu.ravel(order="F")[flat_mask] + fitted[flat_mask]
    return flat.reshape((d, n), order="F")


def blup_predict(model: BlupModel, y: PhenotypeMatrix, method: str = "auto") -> np.ndarray:
    """
    Conditional mean of the masked entries of y given the observed ones.

    Args:
        model: Fitted point estimates over the same individuals as y
        y: Phenotypes with an arbitrary missingness mask
        method: ``auto``, ``structured``, ``dense`` or ``iterative``. ``auto``
            takes the structured path for individualwise missingness, dense up
            to DENSE_BLUP_MAX_DIM, iterative beyond.

    Returns:
        d x n matrix equal to y on observed entries and to the prediction on
        masked ones.

    Raises:
        SingularBlock: If the observed block of H cannot be factorized
    """
    if method not in METHODS:
        raise ConfigError(f"unknown BLUP method {method!r}")
    if y.n_traits != model.n_traits or y.n_samples != model.sk.n:
        raise DimError(f"phenotypes {y.values.shape} do not match the model")
    if tuple(y.sample_ids) != tuple(model.sk.sample_ids):
        raise DimError("phenotype and kinship sample orders differ")

    mask = y.missing_mask
    values = np.where(mask, 0.0, y.values)
    if not mask.any():
        return values
    if mask.all():
        raise MissingData("cannot predict without any observed phenotype entry")

    if method == "auto":
        if _is_individualwise(mask):
            method = "structured"
        elif mask.size <= config.DENSE_BLUP_MAX_DIM:
            method = "dense"
        else:
            method = "iterative"
    if method == "structured" and not _is_individualwise(mask):
        raise ConfigError("structured BLUP needs individualwise missingness")

    logger.debug("BLUP with %s solver for %d masked entries", method, int(mask.sum()))
    solver = {
        "structured": _predict_structured,
        "dense": _predict_dense,
        "iterative": _predict_iterative,
    }[method]
    return solver(model, values, mask)


def impute_phenotypes(model: BlupModel, y: PhenotypeMatrix, method: str = "auto") -> PhenotypeMatrix:
    """Fill masked entries with their BLUP; imputed_mask keeps their positions."""
    filled = blup_predict(model, y, method)
    previous = y.imputed_mask if y.imputed_mask is not None else np.zeros_like(y.missing_mask)
    logger.info("Imputed %d phenotype entries", int(y.missing_mask.sum()))
    return replace(
        y,
        values=filled,
        missing_mask=np.zeros_like(y.missing_mask),
        imputed_mask=previous | y.missing_mask,
    )


def blup_model_from_draws(
    draws: PosteriorDraws, sk: SpectralKinship, x: Optional[np.ndarray] = None
) -> BlupModel:
    """BLUP model at the pooled posterior means."""
    sigma_g, sigma_e, beta = draws.posterior_means()
    return BlupModel(SpdMatrix(sigma_g), SpdMatrix(sigma_e), beta, sk, x)


def blup_model_from_univariate(
    fits: Sequence[UnivariateFit], sk: SpectralKinship, x: Optional[np.ndarray] = None
) -> BlupModel:
    """
    BLUP model with diagonal covariances from per-trait ML fits.

    Zero genetic or environmental estimates are floored at 1e-8 of the trait's
    total variance so the covariances stay SPD.
    """
    g = np.array([f.sigma_g2 for f in fits], dtype=np.float64)
    e = np.array([f.sigma_e2 for f in fits], dtype=np.float64)
    if not np.all(np.isfinite(g) & np.isfinite(e)):
        bad = [f.trait_id for f in fits if not (np.isfinite(f.sigma_g2) and np.isfinite(f.sigma_e2))]
        raise ConfigError(f"traits without identified variance components: {bad}")
    floor = 1e-8 * (g + e)
    beta = np.vstack([np.atleast_1d(f.beta) for f in fits])
    return BlupModel(SpdMatrix(np.diag(np.maximum(g, floor))), SpdMatrix(np.diag(np.maximum(e, floor))), beta, sk, x)


def rmse_and_corr(y_true: np.ndarray, y_pred: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-trait root mean squared error and Pearson correlation.

    A trait whose predictions (or observations) are constant gets NaN
    correlation.

    Raises:
        InsufficientData: With fewer than two columns
    """
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64))
    if y_true.shape != y_pred.shape:
        raise DimError(f"shapes differ: {y_true.shape} vs {y_pred.shape}")
    if y_true.shape[1] < 2:
        raise InsufficientData("correlation needs at least two values per trait")

    resid = y_pred - y_true
    rmse = np.sqrt(np.mean(resid**2, axis=1))
    true_c = y_true - y_true.mean(axis=1, keepdims=True)
    pred_c = y_pred - y_pred.mean(axis=1, keepdims=True)
    denom = np.sqrt(np.sum(true_c**2, axis=1) * np.sum(pred_c**2, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, np.sum(true_c * pred_c, axis=1) / denom, np.nan)
    return rmse, np.clip(corr, -1.0, 1.0)


@dataclass
class CvReport:
    """
    Per-trait RMSE and correlation averaged over folds.

    ``fold_rmse`` / ``fold_corr`` are (folds, d); ``folds`` gives each
    individual's fold index.
    """

    trait_ids: Tuple[str, ...]
    rmse: np.ndarray
    correlation: np.ndarray
    fold_rmse: np.ndarray
    fold_corr: np.ndarray
    folds: np.ndarray
    n_train: List[int]
    n_test: List[int]
    estimator: str = "bayes"
    impute: str = "blup"
    flags: Tuple[str, ...] = ()

    def rows(self) -> List[Dict]:
        """Rows in the (configuration, metric, per-trait value) layout."""
        label = f"{self.estimator}-{self.impute}"
        rows = []
        for metric, values in (("RMSE", self.rmse), ("Corr", self.correlation)):
            row = {"configuration": label, "metric": metric}
            row.update({t: float(v) for t, v in zip(self.trait_ids, values)})
            rows.append(row)
        return rows


def _missingness_strata(mask: np.ndarray, folds: int) -> np.ndarray:
    # one stratum per missingness pattern; patterns too rare to split are pooled
    d = mask.shape[0]
    codes = (mask.T.astype(np.int64) * (1 << np.arange(d))).sum(axis=1)
    values, counts = np.unique(codes, return_counts=True)
    codes = np.where(np.isin(codes, values[counts < folds]), -1, codes)
    pooled = codes == -1
    if 0 < pooled.sum() < folds:
        codes[pooled] = values[np.argmax(counts)]
    return codes


def assign_folds(y: PhenotypeMatrix, folds: int, seed: int) -> np.ndarray:
    """Fold index per individual, stratified on the missingness pattern."""
    if folds < 2 or folds > y.n_samples:
        raise ConfigError(f"folds must lie in [2, {y.n_samples}], got {folds}")
    strata = _missingness_strata(y.missing_mask, folds)
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2**32))
    assignment = np.empty(y.n_samples, dtype=np.int64)
    for f, (_, test) in enumerate(splitter.split(np.zeros(y.n_samples), strata)):
        assignment[test] = f
    return assignment


def _fit_model(
    y_train: PhenotypeMatrix,
    x_train: np.ndarray,
    sk_train: SpectralKinship,
    sk_full: SpectralKinship,
    x_full: np.ndarray,
    estimator: str,
    impute: str,
    gibbs_config: GibbsConfig,
) -> BlupModel:
    if y_train.has_missing and impute == "blup":
        imputer = blup_model_from_univariate(fit_traits(y_train, x_train, sk_train), sk_train, x_train)
        y_train = impute_phenotypes(imputer, y_train)
    elif y_train.has_missing:
        y_train, keep = drop_incomplete_individuals(y_train)
        x_train, sk_train = x_train[:, keep], subset_kinship(sk_train, keep)

    if estimator == "reml":
        fits = fit_traits(y_train, x_train, sk_train)
        return blup_model_from_univariate(fits, sk_full, x_full)
    if gibbs_config.wishart_scale_mode == "mle":
        # prior scales come from this fold's training phenotypes only
        scale_g, scale_e = wishart_scale_from_ml(fit_traits(y_train, x_train, sk_train))
        gibbs_config = replace(gibbs_config, wishart_scale_g=scale_g, wishart_scale_e=scale_e)
    draws = run_chains(y_train, x_train, sk_train, gibbs_config)
    return blup_model_from_draws(draws, sk_full, x_full)


def cross_validate(
    y: PhenotypeMatrix,
    x: Optional[np.ndarray],
    sk: SpectralKinship,
    folds: int = config.CV_FOLDS,
    estimator: str = "bayes",
    seed: int = config.SEED,
    impute: str = "blup",
    gibbs_config: Optional[GibbsConfig] = None,
    threads: int = 1,
) -> CvReport:
    """
    K-fold cross-validation of BLUP predictions.

    Each fold's individuals are hidden; the model is fitted on the rest
    (``drop``: complete training individuals only, ``blup``: training gaps
    imputed first) and the hidden phenotypes are predicted from the training
    phenotypes that were originally observed, using the full kinship.

    Raises:
        DegenerateFold: If a fold holds no observed phenotype
    """
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}")
    if impute not in IMPUTE_MODES:
        raise ConfigError(f"unknown impute mode {impute!r}")
    x = np.ones((1, sk.n)) if x is None else np.atleast_2d(x)
    gibbs_config = gibbs_config or GibbsConfig(seed=seed)
    assignment = assign_folds(y, folds, seed)

    for f in range(folds):
        if y.missing_mask[:, assignment == f].all():
            raise DegenerateFold(f"fold {f + 1} contains no observed phenotype")

    def run_fold(f: int):
        test = np.flatnonzero(assignment == f)
        train = np.flatnonzero(assignment != f)
        sk_train = subset_kinship(sk, train)
        model = _fit_model(
            y.select_samples(train), x[:, train], sk_train, sk, x, estimator, impute, gibbs_config
        )

        hidden = y.missing_mask.copy()
        hidden[:, test] = True
        predicted = blup_predict(model, replace(y, missing_mask=hidden, imputed_mask=None))

        rmse, corr = np.full(y.n_traits, np.nan), np.full(y.n_traits, np.nan)
        for i in range(y.n_traits):
            scored = test[~y.missing_mask[i, test]]
            if scored.size >= 2:
                r, c = rmse_and_corr(y.values[i, scored], predicted[i, scored])
                rmse[i], corr[i] = r[0], c[0]
        logger.info("Fold %d/%d: rmse %s, corr %s", f + 1, folds, np.round(rmse, 4), np.round(corr, 4))
        return rmse, corr, train.size, test.size

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_fold, range(folds)))
    else:
        results = [run_fold(f) for f in range(folds)]

    fold_rmse = np.vstack([r[0] for r in results])
    fold_corr = np.vstack([r[1] for r in results])
    flags: Tuple[str, ...] = ()
    if np.isnan(fold_corr).any():
        flags = (CONSTANT_PREDICTION,)
        logger.warning("Some folds had constant predictions or too few values; correlation is NaN there")
    with warnings.catch_warnings():
        # all-NaN columns average to NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        rmse = np.nanmean(fold_rmse, axis=0)
        corr = np.nanmean(fold_corr, axis=0)
    return CvReport(
        trait_ids=tuple(y.trait_ids),
        rmse=rmse,
        correlation=corr,
        fold_rmse=fold_rmse,
        fold_corr=fold_corr,
        folds=assignment,
        n_train=[r[2] for r in results],
        n_test=[r[3] for r in results],
        estimator=estimator,
        impute=impute,
        flags=flags,
    )
