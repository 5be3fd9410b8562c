"""Shared fixtures: seeded generators, small kinships and simulated datasets."""

from pathlib import Path

import numpy as np
import pytest

from src.gibbs import GibbsConfig
from src.ingest import prepare_genotypes
from src.kinship import SpectralKinship, compute_kinship, spectral_decompose
from src.simulate import simulate_dataset, simulate_genotypes


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def small_kinship(rng) -> SpectralKinship:
    """Kinship over 12 individuals from 80 simulated SNPs."""
    z = prepare_genotypes(simulate_genotypes(12, 80, rng=rng))
    return compute_kinship(z)


@pytest.fixture
def identity_kinship() -> SpectralKinship:
    return spectral_decompose(np.eye(8))


@pytest.fixture
def small_dataset():
    """n=60, d=2 with genetic correlation 0.3 and no missingness."""
    return simulate_dataset(n=60, p=300, h2=(0.6, 0.5), rg=0.3, miss=0.0, seed=7)


@pytest.fixture
def fast_config() -> GibbsConfig:
    """Two short chains keeping exactly 100 draws each."""
    return GibbsConfig(n_chains=2, n_iter=600, burn_in=100, thin=5, seed=11)


@pytest.fixture
def genotype_file(tmp_path: Path) -> Path:
    path = tmp_path / "genotypes.txt"
    path.write_text(
        "snp_id a b c d e\n"
        "rs1 0 1 2 1 0\n"
        "rs2 2 2 1 NA 0\n"
        "rs3 1 0 0 1 2\n"
    )
    return path


@pytest.fixture
def phenotype_file(tmp_path: Path) -> Path:
    path = tmp_path / "phenotypes.tsv"
    path.write_text(
        "sample_id\theight\tweight\n"
        "a\t1.5\t0.2\n"
        "b\tNA\t-0.4\n"
        "c\t0.3\t1.1\n"
        "d\t-0.8\tNA\n"
        "e\t0.1\t0.0\n"
    )
    return path
