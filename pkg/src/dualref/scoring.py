"""Cosine nearest-neighbor scoring against normal references.

All feature rows are assumed L2-normalized (the loaders enforce this), so
cosine distance reduces to 1 - dot product, clamped into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .features import PatchFeatureMap

STAGE_NORMAL = "normal_guided"
STAGE_ABNORMAL = "abnormal_guided"
STAGE_FUSED = "fused"

_STAGE_RANGES = {STAGE_NORMAL: 1.0, STAGE_ABNORMAL: 1.0, STAGE_FUSED: 2.0}


@dataclass(frozen=True)
class ScoreMap:
    """Per-patch anomaly scores on an h*w grid."""

    h: int
    w: int
    values: np.ndarray  # (L,)
    stage: str

    def __post_init__(self):
        if self.stage not in _STAGE_RANGES:
            raise DataError(f"unknown score stage {self.stage!r}")
        if self.values.shape != (self.h * self.w,):
            raise DataError(
                f"score length {self.values.shape} does not match h*w={self.h * self.w}"
            )
        if not np.isfinite(self.values).all():
            raise DataError("scores must be finite")
        hi = _STAGE_RANGES[self.stage]
        if self.values.min() < -1e-6 or self.values.max() > hi + 1e-6:
            raise DataError(
                f"{self.stage} scores outside [0, {hi}]: "
                f"min={self.values.min()}, max={self.values.max()}"
            )

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.h, self.w)


@dataclass(frozen=True)
class NNResult:
    """Per-query-patch nearest normal patch: flat index and cosine distance."""

    indices: np.ndarray  # (L,) int into the flattened normal bank
    distances: np.ndarray  # (L,) in [0, 1]


@dataclass(frozen=True)
class ResidualMap:
    """Feature minus its nearest normal reference feature, row per patch."""

    values: np.ndarray  # (L, C)

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise DataError("residuals must be finite")

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Clamped cosine distance between two unit vectors."""
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(1.0 - float(a @ b), 0.0, 1.0))


def stack_normals(normals: list[PatchFeatureMap]) -> np.ndarray:
    if not normals:
        raise DataError("need at least one normal reference map")
    c = normals[0].c
    for m in normals:
        if m.c != c:
            raise DataError(f"channel mismatch among normals: {m.c} vs {c}")
    return np.concatenate([m.values for m in normals], axis=0)


def nearest_normal_values(queries: np.ndarray, bank: np.ndarray) -> NNResult:
    """Exact exhaustive nearest neighbor of each query row in the bank.

    Ties broken by lowest flat bank index (argmin picks the first minimum).
    """
    if queries.shape[1] != bank.shape[1]:
        raise DataError(f"channel mismatch: {queries.shape[1]} vs {bank.shape[1]}")
    dist = np.clip(1.0 - queries @ bank.T, 0.0, 1.0)
    idx = dist.argmin(axis=1)
    return NNResult(idx, dist[np.arange(queries.shape[0]), idx])


def nearest_normal(queries: PatchFeatureMap, normals: list[PatchFeatureMap]) -> NNResult:
    return nearest_normal_values(queries.values, stack_normals(normals))


def normal_guided_score(
    queries: PatchFeatureMap,
    normals: list[PatchFeatureMap],
    nn: NNResult | None = None,
) -> ScoreMap:
    """Per-patch distance to the nearest normal patch: 0 normal, 1 abnormal."""
    if nn is None:
        nn = nearest_normal(queries, normals)
    return ScoreMap(queries.h, queries.w, nn.distances.copy(), STAGE_NORMAL)


def residual(
    source: np.ndarray | PatchFeatureMap,
    normals: list[PatchFeatureMap],
    nn: NNResult | None = None,
) -> ResidualMap:
    """Row-wise source minus its nearest normal bank row."""
    values = source.values if isinstance(source, PatchFeatureMap) else source
    bank = stack_normals(normals)
    if nn is None:
        nn = nearest_normal_values(values, bank)
    return ResidualMap(values - bank[nn.indices])
