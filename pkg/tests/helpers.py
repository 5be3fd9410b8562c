"""Small builders used across test modules."""

import numpy as np

from src.ingest import PhenotypeMatrix


def random_spd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T / d + 0.5 * np.eye(d))


def phenotypes(values, sample_ids=None) -> PhenotypeMatrix:
    return PhenotypeMatrix.from_values(np.asarray(values, dtype=float), sample_ids=sample_ids)
