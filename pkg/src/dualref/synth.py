"""Synthetic desk-scale benchmark: Gaussian-cluster patch features with
planted rectangular anomalies, split into disjoint original/target domains.

Each category has a unit base direction; normal patches are noisy copies
of it. Each defect type has a global shift direction (orthogonalized per
category) so residuals of the same defect type share structure across
categories, which is what makes the learned attention transfer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import (
    DatasetManifest,
    ManifestRecord,
    NORMAL_TYPE,
    PatchFeatureMap,
    PatchMask,
    normalize_rows,
    save_manifest,
    write_feature_file,
    write_mask_file,
)


@dataclass(frozen=True)
class SynthConfig:
    categories: int = 8
    train_categories: int = 5
    grid_h: int = 16
    grid_w: int = 16
    channels: int = 64
    defect_types: int = 2
    train_normals: int = 10
    test_normals: int = 10
    test_abnormals_per_type: int = 10
    anomaly_shift: float = 0.8
    noise_sigma: float = 0.35
    pixels_per_patch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.train_categories >= self.categories:
            raise DataError("need at least one target-domain category")
        if not 0 < self.anomaly_shift:
            raise DataError("anomaly_shift must be positive")


def _unit(rng: np.random.Generator, c: int) -> np.ndarray:
    v = rng.normal(size=c)
    return v / np.linalg.norm(v)


def _orthogonalize(v: np.ndarray, base: np.ndarray) -> np.ndarray:
    w = v - (v @ base) * base
    n = np.linalg.norm(w)
    if n < 1e-9:
        raise DataError("defect direction collapsed onto the base direction")
    return w / n


def _noise(rng: np.random.Generator, l: int, c: int, sigma: float) -> np.ndarray:
    # per-component std sigma/sqrt(C) so the noise vector length is ~sigma
    return rng.normal(0.0, sigma / np.sqrt(c), size=(l, c))


def _plant_rectangle(rng: np.random.Generator, h: int, w: int) -> tuple[slice, slice]:
    """A contiguous patch rectangle covering >= 1 patch and <= 25% of the grid."""
    max_area = max(1, (h * w) // 4)
    for _ in range(100):
        rh = int(rng.integers(1, max(2, h // 3) + 1))
        rw = int(rng.integers(1, max(2, w // 3) + 1))
        if rh * rw <= max_area:
            break
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    return slice(r0, r0 + rh), slice(c0, c0 + rw)


def generate_benchmark(cfg: SynthConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Write feature/mask files plus train- and target-domain manifests.

    Returns the two manifest paths.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=(cfg.seed, 0x5D17)))
    c = cfg.channels
    h, w = cfg.grid_h, cfg.grid_w
    l = h * w
    image_h = h * cfg.pixels_per_patch
    image_w = w * cfg.pixels_per_patch

    global_defect_dirs = [_unit(rng, c) for _ in range(cfg.defect_types)]
    train_records: list[ManifestRecord] = []
    target_records: list[ManifestRecord] = []

    for cat_i in range(cfg.categories):
        category = f"cat{cat_i:02d}"
        base = _unit(rng, c)
        defect_dirs = [_orthogonalize(d, base) for d in global_defect_dirs]
        records = train_records if cat_i < cfg.train_categories else target_records

        def emit(kind: str, idx: int, split: str, defect: int | None) -> None:
            image_id = f"{category}_{kind}{idx:03d}"
            values = base[None, :] + _noise(rng, l, c, cfg.noise_sigma)
            mask_path = ""
            defect_name = NORMAL_TYPE
            if defect is not None:
                rows, cols = _plant_rectangle(rng, h, w)
                grid_mask = np.zeros((h, w), dtype=np.uint8)
                grid_mask[rows, cols] = 1
                flat = grid_mask.reshape(-1).astype(bool)
                values[flat] += cfg.anomaly_shift * defect_dirs[defect][None, :]
                defect_name = f"shift{defect}"
                mask_path = str(out / "masks" / f"{image_id}.nagm")
                write_mask_file(PatchMask(h, w, grid_mask.reshape(-1)), mask_path)
            fmap = PatchFeatureMap(h, w, c, normalize_rows(values).astype(np.float32))
            feature_path = str(out / "features" / f"{image_id}.nagf")
            write_feature_file(fmap, feature_path)
            records.append(ManifestRecord(
                image_id=image_id, category=category, defect_type=defect_name,
                split=split, feature_path=feature_path,
                mask_path=mask_path or None, image_h=image_h, image_w=image_w,
            ))

        for i in range(cfg.train_normals):
            emit("train", i, "train", None)
        for i in range(cfg.test_normals):
            emit("good", i, "test", None)
        for t in range(cfg.defect_types):
            for i in range(cfg.test_abnormals_per_type):
                emit(f"bad{t}", i, "test", t)

    train_path = out / "train_manifest.tsv"
    target_path = out / "target_manifest.tsv"
    save_manifest(DatasetManifest(train_records), train_path)
    save_manifest(DatasetManifest(target_records), target_path)
    return train_path, target_path
