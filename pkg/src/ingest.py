"""Genotype and phenotype loading, missing-value handling and SNP standardization.

Genotype file: whitespace-delimited text, one SNP per row (``snp_id v1 ... vn``),
optionally preceded by a header row ``snp_id <sample ids>``. Phenotype file: TSV
with a header row ``sample_id <trait names>`` and one row per individual. The
token ``NA`` is the only missing marker in both.

SNP rows are standardized with the population variance (divisor n), so that
the kinship ZtZ/p built from them has trace exactly n.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

import config
from src.errors import (
    ConfigError,
    DegenerateSnp,
    DimError,
    DuplicateSample,
    EmptyInput,
    IoError,
    MissingData,
    ParseError,
)

logger = logging.getLogger(__name__)

DOSAGE_TOKENS = {"0": 0.0, "1": 1.0, "2": 2.0}
GENOTYPE_FORMATS = ("dosage", "real")


@dataclass(frozen=True, eq=False)
class GenotypeMatrix:
    """
    p x n SNP matrix (rows are SNPs, columns individuals) with a missingness mask.
    """

    values: np.ndarray
    missing_mask: np.ndarray
    snp_ids: Tuple[str, ...]
    sample_ids: Tuple[str, ...]

    def __post_init__(self):
        if self.values.shape != self.missing_mask.shape:
            raise DimError(
                f"values {self.values.shape} and mask {self.missing_mask.shape} disagree"
            )
        p, n = self.values.shape
        if len(self.snp_ids) != p or len(self.sample_ids) != n:
            raise DimError(
                f"{len(self.snp_ids)} SNP ids / {len(self.sample_ids)} sample ids "
                f"for a {p} x {n} matrix"
            )

    @property
    def n_snps(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def select_snps(self, keep: np.ndarray) -> "GenotypeMatrix":
        keep = np.asarray(keep)
        return replace(
            self,
            values=self.values[keep],
            missing_mask=self.missing_mask[keep],
            snp_ids=tuple(np.asarray(self.snp_ids, dtype=object)[keep]),
        )


@dataclass(frozen=True, eq=False)
class PhenotypeMatrix:
    """
    d x n trait matrix. Masked entries hold NaN; the mask is authoritative.

    ``imputed_mask`` records which entries were filled by prediction.
    """

    values: np.ndarray
    missing_mask: np.ndarray
    trait_ids: Tuple[str, ...]
    sample_ids: Tuple[str, ...]
    imputed_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.values.shape != self.missing_mask.shape:
            raise DimError(
                f"values {self.values.shape} and mask {self.missing_mask.shape} disagree"
            )
        d, n = self.values.shape
        if len(self.trait_ids) != d or len(self.sample_ids) != n:
            raise DimError(
                f"{len(self.trait_ids)} trait ids / {len(self.sample_ids)} sample ids "
                f"for a {d} x {n} matrix"
            )

    @classmethod
    def from_values(
        cls,
        values: np.ndarray,
        trait_ids: Optional[Sequence[str]] = None,
        sample_ids: Optional[Sequence[str]] = None,
    ) -> "PhenotypeMatrix":
        """Build from a d x n array, treating NaN as missing."""
        values = np.array(values, dtype=np.float64, ndmin=2)
        d, n = values.shape
        mask = np.isnan(values)
        return cls(
            values=values,
            missing_mask=mask,
            trait_ids=tuple(trait_ids or (f"trait{i + 1}" for i in range(d))),
            sample_ids=tuple(sample_ids or (f"ind{j + 1}" for j in range(n))),
        )

    @property
    def n_traits(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(self.missing_mask.any())

    def missingness(self) -> Dict[str, float]:
        """Per-trait fraction of missing entries."""
        fractions = self.missing_mask.mean(axis=1)
        return {t: float(f) for t, f in zip(self.trait_ids, fractions)}

    def select_samples(self, idx: Sequence[int]) -> "PhenotypeMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            values=self.values[:, idx],
            missing_mask=self.missing_mask[:, idx],
            sample_ids=tuple(self.sample_ids[i] for i in idx),
            imputed_mask=None if self.imputed_mask is None else self.imputed_mask[:, idx],
        )

    def select_traits(self, idx: Sequence[int]) -> "PhenotypeMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            values=self.values[idx],
            missing_mask=self.missing_mask[idx],
            trait_ids=tuple(self.trait_ids[i] for i in idx),
            imputed_mask=None if self.imputed_mask is None else self.imputed_mask[idx],
        )


def _read_lines(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    try:
        with path.open("r") as handle:
            return handle.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _parse_floats(fields: np.ndarray, line: int) -> np.ndarray:
    try:
        return fields.astype(np.float64)
    except ValueError:
        for token in fields:
            try:
                float(token)
            except ValueError:
                raise ParseError(f"invalid numeric token {token!r}", line=line) from None
        raise ParseError("unreadable numeric field", line=line) from None


def load_genotypes(path: Union[str, Path], fmt: str = "dosage") -> GenotypeMatrix:
    """
    Parse a whitespace-delimited genotype file.

    Args:
        path: File with one SNP per row, ``snp_id v1 ... vn``
        fmt: ``dosage`` accepts only 0/1/2/NA; ``real`` accepts any finite
            number and NA (files written after imputation or standardization)

    Returns:
        GenotypeMatrix with the mask set where the token is NA

    Raises:
        ParseError: Ragged rows or invalid tokens. Line numbers count data rows,
            the optional header excluded.
        EmptyInput: No data rows
    """
    if fmt not in GENOTYPE_FORMATS:
        raise ConfigError(f"unknown genotype format {fmt!r}; choose from {GENOTYPE_FORMATS}")

    lines = [line for line in _read_lines(path) if line.strip()]
    sample_ids: Optional[List[str]] = None
    if lines and lines[0].split()[0].lower() in ("snp_id", "#snp_id"):
        sample_ids = lines[0].split()[1:]
        lines = lines[1:]
    if not lines:
        raise EmptyInput(f"{path}: no genotype rows")

    n = len(sample_ids) if sample_ids is not None else len(lines[0].split()) - 1
    if n < 1:
        raise ParseError("genotype row has no dosage fields", line=1)

    snp_ids: List[str] = []
    values = np.empty((len(lines), n), dtype=np.float64)
    mask = np.zeros((len(lines), n), dtype=bool)
    dosage_tokens = np.array(list(DOSAGE_TOKENS))
    for row, line in enumerate(lines):
        tokens = line.split()
        if len(tokens) != n + 1:
            raise ParseError(
                f"expected {n + 1} fields (SNP id and {n} dosages), found {len(tokens)}",
                line=row + 1,
            )
        snp_ids.append(tokens[0])
        fields = np.array(tokens[1:])
        missing = fields == config.MISSING_TOKEN
        if fmt == "dosage":
            bad = ~(missing | np.isin(fields, dosage_tokens))
            if bad.any():
                raise ParseError(f"invalid dosage token {fields[bad][0]!r}", line=row + 1)
        parsed = _parse_floats(np.where(missing, "nan", fields), row + 1)
        if fmt == "real" and not np.isfinite(parsed[~missing]).all():
            token = fields[~missing & ~np.isfinite(parsed)][0]
            raise ParseError(f"non-finite token {token!r}", line=row + 1)
        values[row] = parsed
        mask[row] = missing

    if sample_ids is None:
        sample_ids = [f"ind{j + 1}" for j in range(n)]
    if len(set(sample_ids)) != len(sample_ids):
        raise DuplicateSample(f"{path}: duplicate sample ids in genotype header")

    logger.info("Loaded %d SNPs x %d samples from %s (%d missing)", len(lines), n, path, mask.sum())
    return GenotypeMatrix(values, mask, tuple(snp_ids), tuple(sample_ids))


def save_genotypes(g: GenotypeMatrix, path: Union[str, Path]) -> None:
    """Write a genotype matrix in the format load_genotypes reads."""
    path = Path(path)
    try:
        with path.open("w") as handle:
            handle.write(" ".join(["snp_id", *g.sample_ids]) + "\n")
            for snp_id, row, row_mask in zip(g.snp_ids, g.values, g.missing_mask):
                tokens = [
                    config.MISSING_TOKEN if miss else config.FLOAT_FORMAT % value
                    for value, miss in zip(row, row_mask)
                ]
                handle.write(" ".join([snp_id, *tokens]) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def impute_genotype_means(g: GenotypeMatrix) -> GenotypeMatrix:
    """
    Replace missing dosages by the mean of the observed dosages of that SNP.

    Raises:
        DegenerateSnp: If a SNP row has no observed value
    """
    observed = ~g.missing_mask
    counts = observed.sum(axis=1)
    empty = counts == 0
    if empty.any():
        raise DegenerateSnp(
            "SNP rows with no observed genotype",
            snp_ids=[s for s, e in zip(g.snp_ids, empty) if e],
        )
    if not g.missing_mask.any():
        return g

    filled = np.where(observed, g.values, 0.0)
    means = filled.sum(axis=1) / counts
    values = np.where(observed, g.values, means[:, None])
    logger.debug("Imputed %d missing genotypes with SNP means", int(g.missing_mask.sum()))
    return replace(g, values=values, missing_mask=np.zeros_like(g.missing_mask))


def _row_variances(values: np.ndarray) -> np.ndarray:
    return values.var(axis=1)


def drop_monomorphic(g: GenotypeMatrix) -> GenotypeMatrix:
    """
    Remove SNPs with no observed value or zero variance over observed values.

    Pipeline-level counterpart of the DegenerateSnp errors: offending SNPs are
    dropped with a warning and p shrinks downstream.
    """
    observed = ~g.missing_mask
    counts = observed.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        filled = np.where(observed, g.values, 0.0)
        means = filled.sum(axis=1) / counts
        sq = np.where(observed, (g.values - means[:, None]) ** 2, 0.0).sum(axis=1) / counts
    degenerate = (counts == 0) | ~(sq > 0)
    if degenerate.any():
        dropped = [s for s, bad in zip(g.snp_ids, degenerate) if bad]
        logger.warning(
            "Dropping %d monomorphic or fully missing SNPs (e.g. %s)",
            len(dropped),
            ", ".join(dropped[:5]),
        )
        g = g.select_snps(np.flatnonzero(~degenerate))
    if g.n_snps == 0:
        raise EmptyInput("no polymorphic SNPs left after filtering")
    return g


def standardize(g: GenotypeMatrix) -> GenotypeMatrix:
    """
    Center each SNP row to mean 0 and scale to population variance 1.

    Raises:
        MissingData: If any entry is still masked
        DegenerateSnp: If a row has zero variance
    """
    if g.missing_mask.any():
        raise MissingData("standardize needs complete genotypes; run impute_genotype_means first")

    means = g.values.mean(axis=1)
    variances = _row_variances(g.values)
    flat = ~(variances > np.finfo(np.float64).eps)
    if flat.any():
        raise DegenerateSnp(
            "monomorphic SNP rows cannot be standardized",
            snp_ids=[s for s, bad in zip(g.snp_ids, flat) if bad],
        )
    values = (g.values - means[:, None]) / np.sqrt(variances)[:, None]
    return replace(g, values=values)


def is_standardized(g: GenotypeMatrix, tol: float = config.STANDARDIZE_TOL) -> bool:
    if g.missing_mask.any():
        return False
    means = g.values.mean(axis=1)
    variances = _row_variances(g.values)
    return bool(np.all(np.abs(means) <= tol) and np.all(np.abs(variances - 1.0) <= tol))


def prepare_genotypes(g: GenotypeMatrix) -> GenotypeMatrix:
    """Drop degenerate SNPs, mean-impute and standardize."""
    return standardize(impute_genotype_means(drop_monomorphic(g)))


def load_phenotypes(path: Union[str, Path]) -> PhenotypeMatrix:
    """
    Parse a phenotype TSV (header ``sample_id <traits>``, one row per individual).

    Raises:
        ParseError: Non-numeric, non-NA token (line numbers count data rows)
        DuplicateSample: Repeated sample id
        EmptyInput: Header only
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyInput(f"{path}: empty phenotype file") from None
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if frame.shape[1] < 2:
        raise ParseError("phenotype header needs a sample id column and at least one trait", line=0)
    if frame.empty:
        raise EmptyInput(f"{path}: phenotype file has no data rows")

    sample_ids = [s.strip() for s in frame.iloc[:, 0]]
    seen = set()
    for row, sample in enumerate(sample_ids):
        if sample in seen:
            raise DuplicateSample(f"{path}: sample {sample!r} repeated at line {row + 1}")
        seen.add(sample)

    traits = [str(c) for c in frame.columns[1:]]
    raw = frame.iloc[:, 1:].to_numpy()
    values = np.empty(raw.shape, dtype=np.float64)
    for row in range(raw.shape[0]):
        for col in range(raw.shape[1]):
            token = raw[row, col].strip()
            if token == config.MISSING_TOKEN:
                values[row, col] = np.nan
                continue
            try:
                values[row, col] = float(token)
            except ValueError:
                raise ParseError(f"non-numeric phenotype token {token!r}", line=row + 1) from None
            if not np.isfinite(values[row, col]):
                raise ParseError(f"non-finite phenotype token {token!r}", line=row + 1)

    pheno = PhenotypeMatrix(
        values=values.T.copy(),
        missing_mask=np.isnan(values.T),
        trait_ids=tuple(traits),
        sample_ids=tuple(sample_ids),
    )
    for trait, fraction in pheno.missingness().items():
        logger.info("Trait %s: %.1f%% missing", trait, 100.0 * fraction)
    return pheno


def save_phenotypes(y: PhenotypeMatrix, path: Union[str, Path]) -> None:
    """Write a phenotype matrix as TSV with NA for masked entries."""
    values = np.where(y.missing_mask, np.nan, y.values)
    frame = pd.DataFrame(values.T, columns=list(y.trait_ids))
    frame.insert(0, "sample_id", list(y.sample_ids))
    try:
        frame.to_csv(
            path,
            sep="\t",
            index=False,
            na_rep=config.MISSING_TOKEN,
            float_format=config.FLOAT_FORMAT,
        )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_covariates(path: Union[str, Path], sample_ids: Sequence[str]) -> np.ndarray:
    """
    Read a covariate TSV (same layout as phenotypes) into a k x n design matrix.

    An intercept row is prepended; covariates may not be missing.
    """
    cov = align_samples(load_phenotypes(path), sample_ids)
    if cov.has_missing:
        raise MissingData(f"{path}: covariates may not contain NA")
    return np.vstack([np.ones((1, cov.n_samples)), cov.values])


def align_samples(y: PhenotypeMatrix, sample_ids: Sequence[str]) -> PhenotypeMatrix:
    """
    Reorder the columns of y to follow sample_ids.

    Raises:
        DimError: If the two sample sets differ
    """
    sample_ids = list(sample_ids)
    if list(y.sample_ids) == sample_ids:
        return y
    position = {s: j for j, s in enumerate(y.sample_ids)}
    missing = [s for s in sample_ids if s not in position]
    if missing or len(sample_ids) != y.n_samples:
        raise DimError(
            f"phenotype samples do not match genotype samples ({len(missing)} unmatched)"
        )
    return y.select_samples([position[s] for s in sample_ids])


def complete_individuals(y: PhenotypeMatrix) -> np.ndarray:
    """Indices of individuals with every trait observed."""
    return np.flatnonzero(~y.missing_mask.any(axis=0))


def drop_incomplete_individuals(y: PhenotypeMatrix) -> Tuple[PhenotypeMatrix, np.ndarray]:
    """
    Keep only individuals with no missing trait.

    Returns:
        Filtered matrix and the kept column indices
    """
    keep = complete_individuals(y)
    if keep.size == 0:
        raise EmptyInput("no individual has every trait observed")
    if keep.size < y.n_samples:
        logger.info("Dropping %d individuals with missing phenotypes", y.n_samples - keep.size)
    return y.select_samples(keep), keep


def quantile_normalize(y: PhenotypeMatrix) -> PhenotypeMatrix:
    """
    Map each trait's observed values to standard normal quantiles by rank.

    Ties share their average rank; masked entries stay masked.
    """
    values = y.values.copy()
    for i in range(y.n_traits):
        observed = ~y.missing_mask[i]
        m = int(observed.sum())
        if m == 0:
            continue
        ranks = stats.rankdata(values[i, observed])
        values[i, observed] = stats.norm.ppf((ranks - 0.5) / m)
    return replace(y, values=values)
