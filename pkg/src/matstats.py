"""Distributional kernels shared by the sampler, the predictor and the prior tools.

Conventions:
    - Densities and samplers take covariances, not precisions. Code that works
      with the Wishart prior on a precision matrix inverts explicitly.
    - A d x n random matrix X with column covariance A (n x n) and row
      covariance B (d x d) has vec(X) ~ N(vec(M), A kron B), where vec stacks
      columns. Index j*d + i of vec(X) is X[i, j].
    - W(V, nu) has mean nu * V. Inverse-Wishart draws are inverses of W(V, nu)
      draws, so an inverse-Wishart "with scale V" always means "the inverse of
      a W(V, nu) precision".
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import linalg

import config
from src.errors import DimError, ImproperPrior, NotSpd, SingularBlock

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class SpdMatrix:
    """
    Symmetric positive-definite matrix with a cached lower Cholesky factor.
    """

    def __init__(self, m, tol: float = config.SPD_SYMMETRY_TOL):
        """
        Validate and store an SPD matrix.

        Args:
            m: Square array-like
            tol: Symmetry tolerance relative to the largest absolute entry

        Raises:
            DimError: If m is not square
            NotSpd: If m is not symmetric or the Cholesky factorization fails
        """
        m = np.array(m, dtype=np.float64, ndmin=2)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimError(f"SPD matrix must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NotSpd("matrix has non-finite entries")

        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if m.size and np.max(np.abs(m - m.T)) > tol * scale:
            raise NotSpd("matrix is not symmetric")

        m = 0.5 * (m + m.T)
        try:
            chol = linalg.cholesky(m, lower=True)
        except linalg.LinAlgError as exc:
            raise NotSpd(f"Cholesky factorization failed: {exc}") from exc

        m.setflags(write=False)
        chol.setflags(write=False)
        self.m = m
        self.chol = chol

    @classmethod
    def identity(cls, d: int) -> "SpdMatrix":
        return cls(np.eye(d))

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve m @ x = b through the cached Cholesky factor."""
        return linalg.cho_solve((self.chol, True), b)

    def inverse(self) -> "SpdMatrix":
        # d x d only; larger systems go through solve()
        return SpdMatrix(self.solve(np.eye(self.dim)))

    def scaled(self, factor: float) -> "SpdMatrix":
        return SpdMatrix(self.m * factor)

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim})"


@dataclass(frozen=True)
class WishartPrior:
    """
    Wishart prior W(V, nu) on a precision matrix.

    The distribution stays proper only for nu > d - 1.
    """

    scale: SpdMatrix
    dof: float

    def __post_init__(self):
        d = self.scale.dim
        if not np.isfinite(self.dof) or self.dof <= d - 1:
            raise ImproperPrior(
                f"Wishart degrees of freedom must exceed d - 1 = {d - 1}, got {self.dof}"
            )

    @property
    def dim(self) -> int:
        return self.scale.dim


def as_spd(m: Union[SpdMatrix, np.ndarray]) -> SpdMatrix:
    return m if isinstance(m, SpdMatrix) else SpdMatrix(m)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Kronecker product with the block layout [a_ij * b].
    """
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def vec(x: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(x).ravel(order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape((rows, cols), order="F")


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: Union[SpdMatrix, np.ndarray]) -> float:
    """
    Multivariate normal log-density through the Cholesky factor of cov.
    """
    cov = as_spd(cov)
    resid = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    if resid.shape != (cov.dim,):
        raise DimError(f"vector of length {resid.shape} does not match covariance {cov.dim}")
    z = linalg.solve_triangular(cov.chol, resid, lower=True)
    return float(-0.5 * (cov.dim * LOG_2PI + cov.logdet() + z @ z))


def matnorm_logpdf(
    x: np.ndarray,
    m: np.ndarray,
    a: Union[SpdMatrix, np.ndarray],
    b: Union[SpdMatrix, np.ndarray],
) -> float:
    """
    Matrix normal log-density of a d x n matrix.

    Args:
        x: Observed d x n matrix
        m: Mean d x n matrix
        a: Column (between-column) covariance, n x n
        b: Row (within-column) covariance, d x d

    Returns:
        log p(X | M, A, B), equal to the nd-variate normal log-density of
        vec(X) with covariance A kron B.
    """
    a, b = as_spd(a), as_spd(b)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    d, n = x.shape
    if m.shape != x.shape or a.dim != n or b.dim != d:
        raise DimError(
            f"matrix normal dimensions do not conform: x {x.shape}, m {m.shape}, "
            f"a {a.dim}x{a.dim}, b {b.dim}x{b.dim}"
        )

    resid = x - m
    # tr(A^-1 R^t B^-1 R)
    left = b.solve(resid)
    right = a.solve(resid.T)
    quad = float(np.sum(left * right.T))
    return -0.5 * (n * d * LOG_2PI + d * a.logdet() + n * b.logdet() + quad)


def sample_matnorm(
    m: np.ndarray,
    a: Union[SpdMatrix, np.ndarray],
    b: Union[SpdMatrix, np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Draw X = M + L_b G L_a^t with G iid standard normal.
    """
    a, b = as_spd(a), as_spd(b)
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    d, n = m.shape
    if a.dim != n or b.dim != d:
        raise DimError(f"mean {m.shape} does not conform with a {a.dim} and b {b.dim}")
    g = rng.standard_normal((d, n))
    return m + b.chol @ g @ a.chol.T


def sample_wishart(prior: WishartPrior, rng: np.random.Generator) -> SpdMatrix:
    """
    Bartlett construction of a W(V, nu) draw.

    W = L A A^t L^t with L = chol(V); A is lower triangular with
    sqrt(chi2(nu - i)) on the diagonal (i = 0..d-1) and standard normals below.
    """
    d = prior.dim
    if prior.dof <= d - 1:
        raise ImproperPrior(f"Wishart degrees of freedom must exceed {d - 1}")

    bartlett = np.zeros((d, d))
    bartlett[np.diag_indices(d)] = np.sqrt(rng.chisquare(prior.dof - np.arange(d)))
    lower = np.tril_indices(d, k=-1)
    bartlett[lower] = rng.standard_normal(len(lower[0]))

    factor = prior.scale.chol @ bartlett
    return SpdMatrix(factor @ factor.T)


def sample_inverse_wishart(prior: WishartPrior, rng: np.random.Generator) -> SpdMatrix:
    """Covariance whose inverse is a W(V, nu) draw."""
    return sample_wishart(prior, rng).inverse()


def conditional_mvn(
    mu: np.ndarray,
    h: Union[SpdMatrix, np.ndarray],
    observed_idx: Sequence[int],
    y_obs: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Condition a multivariate normal on a subset of its coordinates.

    Args:
        mu: Mean vector of length q
        h: Covariance (q x q)
        observed_idx: Indices of the observed coordinates
        y_obs: Observed values, same order as observed_idx

    Returns:
        Tuple of conditional mean and conditional covariance of the remaining
        coordinates (in increasing index order).
    """
    mu = np.asarray(mu, dtype=np.float64)
    h = h.m if isinstance(h, SpdMatrix) else np.asarray(h, dtype=np.float64)
    q = mu.shape[0]
    if h.shape != (q, q):
        raise DimError(f"covariance {h.shape} does not match mean of length {q}")

    obs = np.asarray(observed_idx, dtype=np.int64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    if obs.size == 0 or obs.size >= q or len(np.unique(obs)) != obs.size:
        raise DimError("observed index set must be a nonempty proper subset")
    if y_obs.shape != obs.shape:
        raise DimError("observed values do not match the observed index set")

    mis = np.setdiff1d(np.arange(q), obs)
    h_oo = h[np.ix_(obs, obs)]
    h_mo = h[np.ix_(mis, obs)]
    try:
        factor = linalg.cho_factor(h_oo, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularBlock(f"observed covariance block is singular: {exc}") from exc

    mean = mu[mis] + h_mo @ linalg.cho_solve(factor, y_obs - mu[obs])
    cov = h[np.ix_(mis, mis)] - h_mo @ linalg.cho_solve(factor, h_mo.T)
    return mean, 0.5 * (cov + cov.T)
