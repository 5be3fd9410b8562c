"""Generative simulator used in place of real genotype/phenotype data.

Phenotypes follow Y = beta X + eta + eps with eta ~ MN(0, K, Sigma) and
eps ~ MN(0, I, Sigma_e). Missingness is MCAR.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

import config
from src.errors import ConfigError, DimError, InvalidFraction, InvalidMaf
from src.ingest import GenotypeMatrix, PhenotypeMatrix, prepare_genotypes
from src.kinship import SpectralKinship, compute_kinship
from src.matstats import SpdMatrix, as_spd

logger = logging.getLogger(__name__)


def simulate_genotypes(
    n: int,
    p: int,
    maf_range: Tuple[float, float] = config.SIM_MAF_RANGE,
    rng: Optional[np.random.Generator] = None,
) -> GenotypeMatrix:
    """
    Draw p x n dosages; per SNP the allele frequency is uniform on maf_range
    and dosages are Binomial(2, f). Monomorphic rows are redrawn.

    Raises:
        InvalidMaf: If the range is not within (0, 0.5] or rows stay monomorphic
    """
    rng = rng or np.random.default_rng(config.SEED)
    low, high = maf_range
    if not (0.0 < low <= high <= 0.5):
        raise InvalidMaf(f"allele frequency range must satisfy 0 < low <= high <= 0.5, got {maf_range}")
    if n < 2 or p < 1:
        raise DimError(f"need n >= 2 and p >= 1, got n={n}, p={p}")

    freqs = rng.uniform(low, high, size=p)
    dosages = rng.binomial(2, freqs[:, None], size=(p, n)).astype(np.float64)

    resampled = 0
    for _ in range(config.SIM_MAX_RESAMPLE):
        flat = np.flatnonzero(np.all(dosages == dosages[:, :1], axis=1))
        if flat.size == 0:
            break
        resampled += flat.size
        new_freqs = rng.uniform(low, high, size=flat.size)
        dosages[flat] = rng.binomial(2, new_freqs[:, None], size=(flat.size, n))
    else:
        raise InvalidMaf(f"SNPs remained monomorphic after {config.SIM_MAX_RESAMPLE} redraws")

    if resampled > p:
        logger.warning("Redrew %d monomorphic SNP rows (p=%d, n=%d)", resampled, p, n)
    elif resampled:
        logger.info("Redrew %d monomorphic SNP rows", resampled)

    return GenotypeMatrix(
        values=dosages,
        missing_mask=np.zeros_like(dosages, dtype=bool),
        snp_ids=tuple(f"snp{i + 1}" for i in range(p)),
        sample_ids=tuple(f"ind{j + 1}" for j in range(n)),
    )


def covariances_from_h2(
    h2: Sequence[float], rg: Union[float, np.ndarray] = 0.0
) -> Tuple[SpdMatrix, SpdMatrix]:
    """
    Genetic and environmental covariances with unit total variance per trait.

    Args:
        h2: Heritability per trait, each in (0, 1)
        rg: Genetic correlation, a scalar for every pair or a d x d matrix

    Returns:
        (Sigma, Sigma_e) with diag(Sigma) = h2 and diag(Sigma_e) = 1 - h2
    """
    h2 = np.asarray(h2, dtype=np.float64)
    if np.any((h2 <= 0) | (h2 >= 1)):
        raise ConfigError(f"heritabilities must lie in (0, 1), got {h2}")
    d = h2.size
    corr = np.full((d, d), float(rg)) if np.ndim(rg) == 0 else np.asarray(rg, dtype=np.float64)
    np.fill_diagonal(corr, 1.0)
    sd_g = np.sqrt(h2)
    sigma_g = corr * np.outer(sd_g, sd_g)
    sigma_e = np.diag(1.0 - h2)
    return SpdMatrix(sigma_g), SpdMatrix(sigma_e)


def simulate_phenotypes(
    sk: SpectralKinship,
    sigma_g: Union[SpdMatrix, np.ndarray],
    sigma_e: Union[SpdMatrix, np.ndarray],
    beta: Optional[np.ndarray] = None,
    x: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    trait_ids: Optional[Sequence[str]] = None,
) -> PhenotypeMatrix:
    """
    Draw Y = beta X + eta + eps.

    eta is drawn through the spectral route, eta = L_Sigma G diag(sqrt(r)) U^t,
    so K itself is never factorized.
    """
    rng = rng or np.random.default_rng(config.SEED)
    sigma_g, sigma_e = as_spd(sigma_g), as_spd(sigma_e)
    d, n = sigma_g.dim, sk.n
    if sigma_e.dim != d:
        raise DimError("genetic and environmental covariances differ in size")
    if x is None:
        x = np.ones((1, n))
    x = np.atleast_2d(x)
    if beta is None:
        beta = np.zeros((d, x.shape[0]))
    beta = np.atleast_2d(beta)
    if x.shape[1] != n or beta.shape != (d, x.shape[0]):
        raise DimError(f"beta {beta.shape} and x {x.shape} do not conform with d={d}, n={n}")

    g = rng.standard_normal((d, n))
    eta = sigma_g.chol @ (g * np.sqrt(sk.eigvals)[None, :]) @ sk.eigvecs.T
    eps = sigma_e.chol @ rng.standard_normal((d, n))
    values = beta @ x + eta + eps
    return PhenotypeMatrix.from_values(values, trait_ids=trait_ids, sample_ids=sk.sample_ids)


def mask_at_random(
    y: PhenotypeMatrix,
    fractions: Union[float, Sequence[float]],
    rng: Optional[np.random.Generator] = None,
) -> PhenotypeMatrix:
    """
    Mask round(f * n) further entries of each trait, drawn uniformly (MCAR)
    from the entries still observed.

    Raises:
        InvalidFraction: If a fraction is outside [0, 1) or a trait has fewer
            observed entries than it needs to mask
    """
    rng = rng or np.random.default_rng(config.SEED)
    fractions = np.broadcast_to(np.asarray(fractions, dtype=np.float64), (y.n_traits,))
    if np.any((fractions < 0) | (fractions >= 1)):
        raise InvalidFraction(f"missingness fractions must lie in [0, 1), got {fractions}")

    mask = y.missing_mask.copy()
    for i, fraction in enumerate(fractions):
        count = int(round(fraction * y.n_samples))
        observed = np.flatnonzero(~mask[i])
        if count > observed.size:
            raise InvalidFraction(
                f"trait {y.trait_ids[i]}: cannot mask {count} of {observed.size} observed entries"
            )
        if count:
            mask[i, rng.choice(observed, size=count, replace=False)] = True
    values = np.where(mask, np.nan, y.values)
    return replace(y, values=values, missing_mask=mask)


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    genotypes: GenotypeMatrix
    kinship: SpectralKinship
    complete: PhenotypeMatrix
    observed: PhenotypeMatrix
    sigma_g: SpdMatrix
    sigma_e: SpdMatrix

    @property
    def h2(self) -> np.ndarray:
        g, e = np.diag(self.sigma_g.m), np.diag(self.sigma_e.m)
        return g / (g + e)


def simulate_dataset(
    n: int,
    p: int,
    h2: Sequence[float],
    rg: float = 0.0,
    miss: Union[float, Sequence[float]] = 0.0,
    seed: int = config.SEED,
    maf_range: Tuple[float, float] = config.SIM_MAF_RANGE,
) -> SimulatedDataset:
    """Genotypes, kinship, complete and masked phenotypes from one seed."""
    genotype_seq, pheno_seq, mask_seq = np.random.SeedSequence(seed).spawn(3)
    genotypes = simulate_genotypes(n, p, maf_range, np.random.default_rng(genotype_seq))
    sk = compute_kinship(prepare_genotypes(genotypes))
    sigma_g, sigma_e = covariances_from_h2(h2, rg)
    complete = simulate_phenotypes(sk, sigma_g, sigma_e, rng=np.random.default_rng(pheno_seq))
    observed = mask_at_random(complete, miss, np.random.default_rng(mask_seq))
    return SimulatedDataset(genotypes, sk, complete, observed, sigma_g, sigma_e)
