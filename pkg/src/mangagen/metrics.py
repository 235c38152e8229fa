"""Distribution metrics over pluggable image features.

Fréchet distance ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) and
mean pairwise cosine similarity.  The matrix square root goes through an
eigendecomposition of the symmetrized product sqrt(S_a) S_b sqrt(S_a):
eigenvalues in (-1e-6, 0) are treated as round-off and clamped to zero, and
anything more negative is an error rather than silently absorbed.

The shipped feature extractor is a stub (flattened 8x8 grayscale thumbnail).
Real backbones plug in behind the same interface; the extractor_id tag on
every FeatureSet prevents silently comparing features from different
backbones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import ConfigError, DataError
from .panels import load_image

__all__ = [
    "FeatureSet",
    "FeatureExtractor",
    "StubFeatureExtractor",
    "build_extractor",
    "frechet_from_moments",
    "frechet_distance",
    "clip_i",
    "features_from_dir",
]

EIGENVALUE_FLOOR = -1e-6


@dataclass(frozen=True)
class FeatureSet:
    """N x d feature rows tagged with the extractor that produced them."""

    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"features must be N x d, got shape {feats.shape}")
        if not np.isfinite(feats).all():
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return int(self.features.shape[0])


class FeatureExtractor(Protocol):
    extractor_id: str

    def extract(self, images: Iterable[np.ndarray]) -> FeatureSet: ...


class StubFeatureExtractor:
    """Flatten of an 8x8 block-averaged grayscale thumbnail (64-d)."""

    extractor_id = "stub"
    grid = 8

    def _one(self, image: np.ndarray) -> np.ndarray:
        gray = np.asarray(image, dtype=np.float64).mean(axis=2)
        rows = np.array_split(gray, self.grid, axis=0)
        cells = [np.array_split(r, self.grid, axis=1) for r in rows]
        return np.array([[c.mean() for c in row] for row in cells]).reshape(-1)

    def extract(self, images: Iterable[np.ndarray]) -> FeatureSet:
        feats = np.stack([self._one(img) for img in images])
        return FeatureSet(features=feats, extractor_id=self.extractor_id)


def build_extractor(name: str) -> FeatureExtractor:
    if name == "stub":
        return StubFeatureExtractor()
    raise ConfigError(f"unknown extractor {name!r}; available: ['stub']")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((mat + mat.T) / 2.0)
    if values.min() < EIGENVALUE_FLOOR:
        raise DataError(
            f"matrix eigenvalue {values.min():.3e} below the {EIGENVALUE_FLOOR} floor; "
            "not a covariance round-off"
        )
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_from_moments(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """Fréchet distance from explicit first and second moments."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """Fréchet distance between two feature sets (N >= 2 each)."""
    if a.extractor_id != b.extractor_id:
        raise DataError(
            f"features from different extractors: {a.extractor_id!r} vs {b.extractor_id!r}"
        )
    if a.features.shape[1] != b.features.shape[1]:
        raise DataError("feature dimensions differ")
    if len(a) < 2 or len(b) < 2:
        raise DataError("need at least 2 samples per set to estimate covariance")
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False))
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def clip_i(gen: FeatureSet, ref: FeatureSet) -> float:
    """Mean cosine similarity over index-paired features, in [-1, 1].

    (Reports multiply by 100 for display.) Zero vectors are rejected by index.
    """
    if gen.extractor_id != ref.extractor_id:
        raise DataError(
            f"features from different extractors: {gen.extractor_id!r} vs {ref.extractor_id!r}"
        )
    if len(gen) != len(ref):
        raise DataError(f"paired sets differ in size: {len(gen)} vs {len(ref)}")
    if len(gen) == 0:
        raise DataError("empty feature sets")
    sims = []
    for i, (g, r) in enumerate(zip(gen.features, ref.features)):
        ng, nr = np.linalg.norm(g), np.linalg.norm(r)
        if ng == 0.0:
            raise DataError(f"gen[{i}] is a zero vector")
        if nr == 0.0:
            raise DataError(f"ref[{i}] is a zero vector")
        sims.append(float(g @ r / (ng * nr)))
    return float(np.mean(sims))


def features_from_dir(extractor: FeatureExtractor, directory: str | Path) -> FeatureSet:
    """Extract features from every PNG in a directory, in sorted name order."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images under {directory}")
    return extractor.extract(load_image(p) for p in paths)
