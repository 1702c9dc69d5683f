"""On-disk formats for patch features, patch masks, and dataset manifests.

Feature file ("NAGF"):  magic 4B | version u32 LE | h u32 | w u32 | C u32 |
h*w*C float32 LE, row-major by patch index i = row*w + col.
Mask file ("NAGM"):     magic 4B | version u32 LE | h u32 | w u32 | h*w bytes in {0,1}.
Manifest:               UTF-8 text, one record per line, tab-separated:
image_id, category, defect_type, split, feature_path, mask_path (may be empty),
image_h, image_w.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

FEATURE_MAGIC = b"NAGF"
MASK_MAGIC = b"NAGM"
FORMAT_VERSION = 1

NORMAL_TYPE = "NORMAL"


def normalize_rows(values: np.ndarray) -> np.ndarray:
    """L2-normalize each row; all-zero rows are left untouched."""
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return values / safe


@dataclass(frozen=True)
class PatchFeatureMap:
    """An h*w grid of C-dimensional patch features for one image."""

    h: int
    w: int
    c: int
    values: np.ndarray  # (L, C) float32/float64, L = h*w

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.c < 1:
            raise DataError(f"invalid grid dims h={self.h} w={self.w} c={self.c}")
        if self.values.shape != (self.h * self.w, self.c):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"(h*w, c)=({self.h * self.w}, {self.c})"
            )
        if not np.isfinite(self.values).all():
            raise DataError("feature values must be finite")

    @property
    def num_patches(self) -> int:
        return self.h * self.w


@dataclass(frozen=True)
class PatchMask:
    """Per-patch binary anomaly mask; 1 marks an anomalous patch."""

    h: int
    w: int
    bits: np.ndarray  # (L,) uint8 in {0, 1}

    def __post_init__(self):
        if self.bits.shape != (self.h * self.w,):
            raise DataError(
                f"mask length {self.bits.shape} does not match h*w={self.h * self.w}"
            )
        if not np.isin(self.bits, (0, 1)).all():
            raise DataError("mask bits must be 0 or 1")

    @property
    def num_patches(self) -> int:
        return self.h * self.w

    def any_set(self) -> bool:
        return bool(self.bits.any())


def zero_mask(h: int, w: int) -> PatchMask:
    return PatchMask(h, w, np.zeros(h * w, dtype=np.uint8))


def write_feature_file(fmap: PatchFeatureMap, path: str | Path) -> None:
    payload = np.ascontiguousarray(fmap.values, dtype="<f4").tobytes()
    header = FEATURE_MAGIC + struct.pack("<IIII", FORMAT_VERSION, fmap.h, fmap.w, fmap.c)
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise DataError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_file(path: str | Path, normalize: bool = False) -> PatchFeatureMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    version, h, w, c = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{path}: invalid dims h={h} w={w} c={c}")
    expected = 20 + h * w * c * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload length {len(raw)} != expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=20).reshape(h * w, c).copy()
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite feature values")
    if normalize:
        values = normalize_rows(values)
    return PatchFeatureMap(h, w, c, values)


def write_mask_file(mask: PatchMask, path: str | Path) -> None:
    header = MASK_MAGIC + struct.pack("<III", FORMAT_VERSION, mask.h, mask.w)
    try:
        Path(path).write_bytes(header + mask.bits.astype(np.uint8).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write mask file {path}: {exc}") from exc


def read_mask_file(path: str | Path) -> PatchMask:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read mask file {path}: {exc}") from exc
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MASK_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MASK_MAGIC!r}")
    version, h, w = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) != 16 + h * w:
        raise FormatError(f"{path}: payload length {len(raw)} != expected {16 + h * w}")
    bits = np.frombuffer(raw, dtype=np.uint8, offset=16).copy()
    if not np.isin(bits, (0, 1)).all():
        raise FormatError(f"{path}: mask bytes outside {{0,1}}")
    return PatchMask(h, w, bits)


def downsample_mask(pixel_mask: np.ndarray, h: int, w: int) -> PatchMask:
    """Max-pool a pixel mask onto an h*w patch grid.

    Patch (r, c) covers pixel rows [floor(r*H/h), floor((r+1)*H/h)) and the
    analogous column range; the patch bit is set iff any covered pixel is set.
    """
    if pixel_mask.ndim != 2:
        raise DataError(f"pixel mask must be 2-D, got shape {pixel_mask.shape}")
    big_h, big_w = pixel_mask.shape
    if big_h < h or big_w < w:
        raise DataError(f"pixel mask {big_h}x{big_w} smaller than patch grid {h}x{w}")
    bits = np.zeros(h * w, dtype=np.uint8)
    binary = pixel_mask != 0
    for r in range(h):
        r0, r1 = (r * big_h) // h, ((r + 1) * big_h) // h
        for c in range(w):
            c0, c1 = (c * big_w) // w, ((c + 1) * big_w) // w
            if binary[r0:r1, c0:c1].any():
                bits[r * w + c] = 1
    return PatchMask(h, w, bits)


def expand_mask(mask: PatchMask, big_h: int, big_w: int) -> np.ndarray:
    """Paint each patch bit over its pixel cell; exact inverse of the
    downsampling cell geometry, so downsample(expand(m)) == m."""
    if big_h < mask.h or big_w < mask.w:
        raise DataError(f"pixel grid {big_h}x{big_w} smaller than patch grid "
                        f"{mask.h}x{mask.w}")
    row_ends = np.array([((r + 1) * big_h) // mask.h for r in range(mask.h)])
    col_ends = np.array([((c + 1) * big_w) // mask.w for c in range(mask.w)])
    row_idx = np.searchsorted(row_ends, np.arange(big_h), side="right")
    col_idx = np.searchsorted(col_ends, np.arange(big_w), side="right")
    grid = mask.bits.reshape(mask.h, mask.w)
    return grid[np.ix_(row_idx, col_idx)]


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    category: str
    defect_type: str  # NORMAL_TYPE for good samples
    split: str  # "train" | "test"
    feature_path: str
    mask_path: str | None
    image_h: int
    image_w: int

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"record {self.image_id}: bad split {self.split!r}")
        if self.image_h < 1 or self.image_w < 1:
            raise DataError(f"record {self.image_id}: bad image size")

    @property
    def is_abnormal(self) -> bool:
        return self.defect_type != NORMAL_TYPE


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise DataError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            if rec.split == "train" and rec.is_abnormal:
                raise DataError(
                    f"record {rec.image_id}: train split must contain only "
                    f"{NORMAL_TYPE} samples"
                )
            if rec.split == "test" and rec.is_abnormal and not rec.mask_path:
                raise DataError(f"record {rec.image_id}: abnormal test record needs a mask")

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def by_split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = []
    for r in manifest.records:
        fields = (
            r.image_id, r.category, r.defect_type, r.split,
            r.feature_path, r.mask_path or "", str(r.image_h), str(r.image_w),
        )
        for f in fields[:6]:
            if "\t" in f or "\n" in f:
                raise DataError(f"record {r.image_id}: field contains tab/newline")
        lines.append("\t".join(fields))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 tab-separated fields, got {len(parts)}")
        try:
            rec = ManifestRecord(
                image_id=parts[0], category=parts[1], defect_type=parts[2],
                split=parts[3], feature_path=parts[4], mask_path=parts[5] or None,
                image_h=int(parts[6]), image_w=int(parts[7]),
            )
        except (ValueError, DataError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        records.append(rec)
    return DatasetManifest(records)
