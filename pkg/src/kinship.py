"""Relatedness matrix K = ZtZ/p and its spectral decomposition.

Rotating phenotypes by the eigenvectors U of K decouples individuals: column j
of Y U has genetic covariance r_j * Sigma and environmental covariance Sigma_e.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from scipy import linalg

import config
from src.errors import DimError, InvalidScale, IoError, NotStandardized, NumericalBreakdown
from src.ingest import GenotypeMatrix, is_standardized

logger = logging.getLogger(__name__)

KINSHIP_FILE = "K.tsv"
EIGEN_FILE = "K.eigen.tsv"
META_FILE = "K.meta.yaml"


@dataclass(frozen=True, eq=False)
class SpectralKinship:
    """
    Kinship matrix with eigenvectors (columns of ``eigvecs``) and eigenvalues
    sorted in descending order. ``scale`` records any rescaling applied to k.
    """

    k: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    sample_ids: Tuple[str, ...]
    scale: float = 1.0

    @property
    def n(self) -> int:
        return self.k.shape[0]

    def rotate(self, m: np.ndarray) -> np.ndarray:
        """Right-multiply a (rows x n) matrix by U."""
        return np.atleast_2d(m) @ self.eigvecs


def _fix_signs(eigvecs: np.ndarray) -> np.ndarray:
    # first component with non-negligible magnitude is made positive
    significant = np.abs(eigvecs) > 1e-12
    first = np.argmax(significant, axis=0)
    signs = np.sign(eigvecs[first, np.arange(eigvecs.shape[1])])
    signs[signs == 0] = 1.0
    return eigvecs * signs


def spectral_decompose(
    k: np.ndarray,
    sample_ids: Optional[Sequence[str]] = None,
    scale: float = 1.0,
) -> SpectralKinship:
    """
    Eigendecompose a symmetric PSD kinship matrix.

    Negative eigenvalues from round-off are clipped to 0. Anything more
    negative than -EIGEN_CLIP_TOL * max eigenvalue aborts.

    Raises:
        DimError: If k is not square
        NumericalBreakdown: If k is not symmetric or clearly indefinite
    """
    k = np.array(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimError(f"kinship must be square, got {k.shape}")
    n = k.shape[0]
    if sample_ids is None:
        sample_ids = [f"ind{j + 1}" for j in range(n)]
    if len(sample_ids) != n:
        raise DimError(f"{len(sample_ids)} sample ids for a {n} x {n} kinship")

    asym = np.max(np.abs(k - k.T)) if n else 0.0
    if asym > config.SPD_SYMMETRY_TOL * max(1.0, float(np.max(np.abs(k)))):
        raise NumericalBreakdown(f"kinship is not symmetric (max asymmetry {asym:.3g})")
    k = 0.5 * (k + k.T)

    eigvals, eigvecs = linalg.eigh(k)
    order = np.argsort(-eigvals, kind="stable")
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    top = max(float(eigvals[0]), 0.0) if n else 0.0
    lowest = float(eigvals[-1]) if n else 0.0
    if lowest < -(config.EIGEN_CLIP_TOL * top + 1e-12):
        logger.error(
            "Kinship eigenvalue diagnostics: n=%d max=%.6g min=%.6g trace=%.6g "
            "negatives=%d",
            n,
            top,
            lowest,
            float(np.trace(k)),
            int(np.sum(eigvals < 0)),
        )
        raise NumericalBreakdown(
            f"kinship has eigenvalue {lowest:.3g} below clipping tolerance"
        )
    clipped = eigvals < 0
    if clipped.any():
        logger.debug("Clipping %d round-off negative eigenvalues", int(clipped.sum()))
        eigvals = np.where(clipped, 0.0, eigvals)

    eigvecs = _fix_signs(eigvecs)
    for arr in (k, eigvals, eigvecs):
        arr.setflags(write=False)
    return SpectralKinship(k, eigvecs, eigvals, tuple(sample_ids), float(scale))


def compute_kinship(
    z: GenotypeMatrix,
    block_size: int = config.KINSHIP_BLOCK_SIZE,
    threads: int = 1,
) -> SpectralKinship:
    """
    Build K = ZtZ / p from standardized genotypes and decompose it.

    Args:
        z: Standardized p x n genotypes without missing values
        block_size: SNPs per block; memory stays O(n^2 + block_size * n)
        threads: Worker threads over SNP blocks. Partial sums are reduced in
            block order, so the result does not depend on scheduling.

    Raises:
        NotStandardized: If any row fails the mean-0 / variance-1 check
    """
    if z.n_snps < 1:
        raise NotStandardized("no SNPs to build a kinship from")
    if not is_standardized(z):
        raise NotStandardized("genotype rows must have mean 0 and variance 1 with no missing values")

    p, n = z.values.shape
    starts = range(0, p, block_size)

    def block_product(start: int) -> np.ndarray:
        block = z.values[start : start + block_size]
        return block.T @ block

    k = np.zeros((n, n))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for partial in pool.map(block_product, starts):
                k += partial
    else:
        for start in starts:
            k += block_product(start)
    k /= p

    logger.info("Kinship built from %d SNPs over %d individuals (trace %.6f)", p, n, np.trace(k))
    return spectral_decompose(k, z.sample_ids)


def rescale_kinship(sk: SpectralKinship, sigma2_beta: float) -> SpectralKinship:
    """
    Rescale K to sigma2_beta * K. Eigenvectors are unchanged.

    Raises:
        InvalidScale: If the factor is not a positive finite number
    """
    if not np.isfinite(sigma2_beta) or sigma2_beta <= 0:
        raise InvalidScale(f"kinship scale must be positive, got {sigma2_beta}")
    if sigma2_beta == 1.0:
        return sk

    k = sk.k * sigma2_beta
    eigvals = sk.eigvals * sigma2_beta
    k.setflags(write=False)
    eigvals.setflags(write=False)
    return replace(sk, k=k, eigvals=eigvals, scale=sk.scale * sigma2_beta)


def subset_kinship(sk: SpectralKinship, idx: Sequence[int]) -> SpectralKinship:
    """Kinship restricted to a subset of individuals, re-decomposed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == sk.n and np.array_equal(idx, np.arange(sk.n)):
        return sk
    return spectral_decompose(
        sk.k[np.ix_(idx, idx)],
        [sk.sample_ids[i] for i in idx],
        scale=sk.scale,
    )


def save_kinship(sk: SpectralKinship, out_dir: Union[str, Path]) -> None:
    """
    Write K.tsv (sample-id header), K.eigen.tsv (first row eigenvalues, then
    one row per eigenvector) and K.meta.yaml.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(sk.k, index=list(sk.sample_ids), columns=list(sk.sample_ids))
        frame.to_csv(
            out_dir / KINSHIP_FILE,
            sep="\t",
            index_label="sample_id",
            float_format=config.FLOAT_FORMAT,
        )
        np.savetxt(
            out_dir / EIGEN_FILE,
            np.vstack([sk.eigvals, sk.eigvecs.T]),
            fmt=config.FLOAT_FORMAT,
            delimiter="\t",
        )
        with (out_dir / META_FILE).open("w") as handle:
            yaml.safe_dump({"n": sk.n, "scale": float(sk.scale)}, handle, sort_keys=False)
    except OSError as exc:
        raise IoError(f"cannot write kinship to {out_dir}: {exc}") from exc


def load_kinship(in_dir: Union[str, Path]) -> SpectralKinship:
    """Read a kinship directory written by save_kinship."""
    in_dir = Path(in_dir)
    try:
        frame = pd.read_csv(
            in_dir / KINSHIP_FILE, sep="\t", dtype={"sample_id": str}, float_precision="round_trip"
        ).set_index("sample_id")
        eigen = np.loadtxt(in_dir / EIGEN_FILE, delimiter="\t", ndmin=2)
        meta = {}
        if (in_dir / META_FILE).exists():
            with (in_dir / META_FILE).open() as handle:
                meta = yaml.safe_load(handle) or {}
    except OSError as exc:
        raise IoError(f"cannot read kinship from {in_dir}: {exc}") from exc

    k = frame.to_numpy(dtype=np.float64)
    n = k.shape[0]
    if eigen.shape != (n + 1, n):
        raise DimError(f"{EIGEN_FILE} has shape {eigen.shape}, expected {(n + 1, n)}")
    eigvals = eigen[0].copy()
    eigvecs = eigen[1:].T.copy()
    for arr in (k, eigvals, eigvecs):
        arr.setflags(write=False)
    return SpectralKinship(
        k=k,
        eigvecs=eigvecs,
        eigvals=eigvals,
        sample_ids=tuple(str(s) for s in frame.index),
        scale=float(meta.get("scale", 1.0)),
    )
