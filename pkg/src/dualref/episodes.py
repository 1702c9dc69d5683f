"""Episode construction: queries paired with normal/abnormal reference sets.

Training episodes draw a query uniformly from the manifest's test pool,
normal references from the same-category train split, and abnormal
references of the query's defect type (a random type for normal queries).
Test-time reference sets are frozen once per (category, defect type) key.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .features import (
    DatasetManifest,
    ManifestRecord,
    PatchFeatureMap,
    PatchMask,
    read_feature_file,
    read_mask_file,
    zero_mask,
)


@dataclass(frozen=True)
class SamplerConfig:
    k1: int
    k2: int
    seed: int
    mode: str = "train"

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise DataError(f"reference counts must be positive, got K1={self.k1} K2={self.k2}")
        if self.mode not in ("train", "test"):
            raise DataError(f"bad sampler mode {self.mode!r}")
        if self.k1 < self.k2:
            warnings.warn(f"K1={self.k1} < K2={self.k2}; normal references usually dominate")


@dataclass
class ReferenceSet:
    category: str
    normals: list[PatchFeatureMap]
    abnormals: list[tuple[PatchFeatureMap, PatchMask]]
    normal_ids: list[str] = field(default_factory=list)
    abnormal_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.normals) < 1:
            raise DataError("reference set needs at least one normal map")
        if len(self.abnormals) < 1:
            raise DataError("reference set needs at least one abnormal map")
        for fmap, mask in self.abnormals:
            if mask.num_patches != fmap.num_patches:
                raise DataError("abnormal mask length does not match its feature map")
            if not mask.any_set():
                raise DataError("abnormal reference mask has no set bits")

    @property
    def k1(self) -> int:
        return len(self.normals)

    @property
    def k2(self) -> int:
        return len(self.abnormals)

    def all_ids(self) -> set[str]:
        return set(self.normal_ids) | set(self.abnormal_ids)

    def stacked_abnormal_features(self) -> np.ndarray:
        return np.concatenate([f.values for f, _ in self.abnormals], axis=0)

    def stacked_abnormal_mask(self) -> np.ndarray:
        return np.concatenate([m.bits for _, m in self.abnormals], axis=0)


@dataclass
class Episode:
    query: PatchFeatureMap
    query_mask: PatchMask
    label: int
    refs: ReferenceSet
    category: str
    defect_type: str
    query_id: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0/1, got {self.label}")
        if bool(self.query_mask.any_set()) != bool(self.label):
            raise DataError(
                f"episode {self.query_id}: label {self.label} disagrees with mask"
            )
        if self.refs.category != self.category:
            raise DataError(
                f"episode {self.query_id}: reference category {self.refs.category!r} "
                f"!= query category {self.category!r}"
            )
        if self.query_id and self.query_id in self.refs.all_ids():
            raise DataError(f"episode {self.query_id}: query leaked into its references")


class _Index:
    """Category/defect-type lookup tables over one manifest."""

    def __init__(self, manifest: DatasetManifest):
        self.test_pool: list[ManifestRecord] = manifest.by_split("test")
        self.train_normals: dict[str, list[ManifestRecord]] = {}
        self.abnormal_by_key: dict[tuple[str, str], list[ManifestRecord]] = {}
        self.types_by_cat: dict[str, list[str]] = {}
        for rec in manifest.records:
            if rec.split == "train":
                self.train_normals.setdefault(rec.category, []).append(rec)
            elif rec.is_abnormal:
                key = (rec.category, rec.defect_type)
                self.abnormal_by_key.setdefault(key, []).append(rec)
        for cat, dtype in sorted(self.abnormal_by_key):
            self.types_by_cat.setdefault(cat, []).append(dtype)


def _load_map(path: str, cache: dict | None) -> PatchFeatureMap:
    if cache is not None and path in cache:
        return cache[path]
    fmap = read_feature_file(path, normalize=True)
    if cache is not None:
        cache[path] = fmap
    return fmap


def _load_abnormal(rec: ManifestRecord, cache: dict | None) -> tuple[PatchFeatureMap, PatchMask]:
    fmap = _load_map(rec.feature_path, cache)
    mask = read_mask_file(rec.mask_path)
    return fmap, mask


def _pick(rng: np.random.Generator, pool: list, k: int, category: str, what: str) -> list:
    if len(pool) < k:
        raise DataError(
            f"category {category!r}: need {k} {what}, have {len(pool)} "
            f"(short by {k - len(pool)})"
        )
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in idx]


def _build_reference_set(
    index: _Index,
    rng: np.random.Generator,
    category: str,
    defect_type: str,
    cfg: SamplerConfig,
    exclude_id: str | None,
    cache: dict | None,
) -> ReferenceSet:
    normal_pool = index.train_normals.get(category, [])
    normal_recs = _pick(rng, normal_pool, cfg.k1, category, "train-split normals")
    abnormal_pool = [
        r for r in index.abnormal_by_key.get((category, defect_type), [])
        if r.image_id != exclude_id
    ]
    abnormal_recs = _pick(
        rng, abnormal_pool, cfg.k2, category, f"abnormal references of type {defect_type!r}"
    )
    return ReferenceSet(
        category=category,
        normals=[_load_map(r.feature_path, cache) for r in normal_recs],
        abnormals=[_load_abnormal(r, cache) for r in abnormal_recs],
        normal_ids=[r.image_id for r in normal_recs],
        abnormal_ids=[r.image_id for r in abnormal_recs],
    )


def _query_mask(rec: ManifestRecord, fmap: PatchFeatureMap) -> PatchMask:
    if not rec.is_abnormal:
        return zero_mask(fmap.h, fmap.w)
    mask = read_mask_file(rec.mask_path)
    if not mask.any_set():
        raise DataError(f"abnormal record {rec.image_id} has an all-zero mask")
    return mask


def sample_train_episode(
    manifest: DatasetManifest,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    cache: dict | None = None,
    index: "_Index | None" = None,
) -> Episode:
    """Draw one training episode; rng is the explicit sampling state."""
    if index is None:
        index = _Index(manifest)
    if not index.test_pool:
        raise DataError("manifest has no test records to sample queries from")
    rec = index.test_pool[int(rng.integers(len(index.test_pool)))]
    if rec.is_abnormal:
        defect_type = rec.defect_type
    else:
        types = index.types_by_cat.get(rec.category, [])
        if not types:
            raise DataError(f"category {rec.category!r}: no abnormal records for references")
        defect_type = types[int(rng.integers(len(types)))]
    refs = _build_reference_set(
        index, rng, rec.category, defect_type, cfg, exclude_id=rec.image_id, cache=cache
    )
    fmap = _load_map(rec.feature_path, cache)
    return Episode(
        query=fmap,
        query_mask=_query_mask(rec, fmap),
        label=int(rec.is_abnormal),
        refs=refs,
        category=rec.category,
        defect_type=rec.defect_type,
        query_id=rec.image_id,
    )


def build_test_reference_sets(
    manifest: DatasetManifest,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    cache: dict | None = None,
) -> dict[tuple[str, str], ReferenceSet]:
    """One frozen ReferenceSet per (category, defect_type), deterministic per rng."""
    index = _Index(manifest)
    refsets: dict[tuple[str, str], ReferenceSet] = {}
    for key in sorted(index.abnormal_by_key):
        category, defect_type = key
        refsets[key] = _build_reference_set(
            index, rng, category, defect_type, cfg, exclude_id=None, cache=cache
        )
    return refsets


def _record_rng(seed: int, image_id: str) -> np.random.Generator:
    digest = hashlib.blake2s(image_id.encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(np.random.Philox(key=(seed, int.from_bytes(digest, "little"))))


def episode_for_test_record(
    manifest: DatasetManifest,
    rec: ManifestRecord,
    refsets: dict[tuple[str, str], ReferenceSet],
    cfg: SamplerConfig,
    cache: dict | None = None,
    index: "_Index | None" = None,
) -> Episode:
    """Pair a test record with its frozen reference set.

    Normal queries get a deterministically seeded random defect-type key.
    If the query itself sits in its set's abnormal references, that slot is
    replaced by a deterministic same-category alternative.
    """
    if index is None:
        index = _Index(manifest)
    rng = _record_rng(cfg.seed, rec.image_id)
    if rec.is_abnormal:
        key = (rec.category, rec.defect_type)
    else:
        types = index.types_by_cat.get(rec.category, [])
        if not types:
            raise DataError(f"category {rec.category!r}: no abnormal records for references")
        key = (rec.category, types[int(rng.integers(len(types)))])
    if key not in refsets:
        raise DataError(f"no reference set built for {key}")
    refs = refsets[key]
    if rec.image_id in refs.all_ids():
        refs = _substitute_conflict(index, refs, key, rec, cfg, rng, cache)
    fmap = _load_map(rec.feature_path, cache)
    return Episode(
        query=fmap,
        query_mask=_query_mask(rec, fmap),
        label=int(rec.is_abnormal),
        refs=refs,
        category=rec.category,
        defect_type=rec.defect_type,
        query_id=rec.image_id,
    )


def _substitute_conflict(
    index: _Index,
    refs: ReferenceSet,
    key: tuple[str, str],
    rec: ManifestRecord,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    cache: dict | None,
) -> ReferenceSet:
    category, defect_type = key
    taken = refs.all_ids()
    same_type = [
        r for r in index.abnormal_by_key.get(key, [])
        if r.image_id != rec.image_id and r.image_id not in taken
    ]
    other = [
        r for (cat, _), recs in sorted(index.abnormal_by_key.items()) if cat == category
        for r in recs if r.image_id != rec.image_id and r.image_id not in taken
    ]
    candidates = same_type or other
    if not candidates:
        raise DataError(
            f"category {category!r}: no abnormal sample besides the query "
            f"to use as a {defect_type!r} reference"
        )
    pick = candidates[int(rng.integers(len(candidates)))]
    slot = refs.abnormal_ids.index(rec.image_id)
    abnormals = list(refs.abnormals)
    abnormal_ids = list(refs.abnormal_ids)
    abnormals[slot] = _load_abnormal(pick, cache)
    abnormal_ids[slot] = pick.image_id
    return ReferenceSet(
        category=refs.category,
        normals=refs.normals,
        abnormals=abnormals,
        normal_ids=refs.normal_ids,
        abnormal_ids=abnormal_ids,
    )
