import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dualref.features import (
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


@pytest.fixture
def make_manifest(tmp_path):
    """Factory writing a small on-disk dataset and returning its manifest.

    spec maps categories to per-defect-type abnormal counts, e.g.
    {"catA": {"train": 3, "good": 2, "crack": 2, "dent": 1}}.
    """

    def build(spec, h=4, w=4, c=8, seed=0, image_scale=2):
        rng = np.random.default_rng(seed)
        records = []
        for category, counts in spec.items():
            base = rng.normal(size=c)
            base /= np.linalg.norm(base)
            for kind, count in counts.items():
                for i in range(count):
                    image_id = f"{category}_{kind}_{i}"
                    values = base[None, :] + rng.normal(0, 0.05, size=(h * w, c))
                    mask_path = None
                    is_abnormal = kind not in ("train", "good")
                    if is_abnormal:
                        bits = np.zeros(h * w, dtype=np.uint8)
                        patch = int(rng.integers(h * w))
                        bits[patch] = 1
                        shift = rng.normal(size=c)
                        values[patch] += shift / np.linalg.norm(shift)
                        mask_path = str(tmp_path / f"{image_id}.nagm")
                        write_mask_file(PatchMask(h, w, bits), mask_path)
                    fmap = PatchFeatureMap(
                        h, w, c, normalize_rows(values).astype(np.float32))
                    feature_path = str(tmp_path / f"{image_id}.nagf")
                    write_feature_file(fmap, feature_path)
                    records.append(ManifestRecord(
                        image_id=image_id,
                        category=category,
                        defect_type=NORMAL_TYPE if not is_abnormal else kind,
                        split="train" if kind == "train" else "test",
                        feature_path=feature_path,
                        mask_path=mask_path,
                        image_h=h * image_scale,
                        image_w=w * image_scale,
                    ))
        manifest = DatasetManifest(records)
        path = tmp_path / "manifest.tsv"
        save_manifest(manifest, path)
        return manifest, path

    return build
