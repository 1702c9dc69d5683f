"""Frozen-model episode scoring, score-map upsampling, and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episodes import (
    Episode,
    SamplerConfig,
    _Index,
    build_test_reference_sets,
    episode_for_test_record,
)
from .errors import DataError
from .features import DatasetManifest, PatchFeatureMap, expand_mask, write_feature_file
from .metrics import EvalRecord, MetricReport, evaluate_run
from .model import ModelParams, forward_scores, image_score
from .scoring import STAGE_FUSED, ScoreMap, normal_guided_score, residual
from .training import episode_inputs


def score_episode(
    params: ModelParams,
    ep: Episode,
    score_fraction: float = 0.01,
    ablate_abnormal: bool = False,
) -> tuple[ScoreMap, float]:
    """Score one episode with frozen parameters: fused map plus image score.

    With ablate_abnormal the attention branch is forced to zero, which
    reduces the pipeline to plain nearest-neighbor scoring bit-for-bit.
    """
    if params.channels != ep.query.c:
        raise DataError(
            f"model channels {params.channels} != episode channels {ep.query.c}"
        )
    if ablate_abnormal:
        s_n = normal_guided_score(ep.query, ep.refs.normals)
        fused_values = s_n.values.astype(params.proxies.data.dtype)
    else:
        inputs = episode_inputs(ep)
        fused_node, _ = forward_scores(params, score_fraction=score_fraction, **inputs)
        fused_values = fused_node.data.reshape(-1).copy()
    fused = ScoreMap(ep.query.h, ep.query.w, fused_values, STAGE_FUSED)
    return fused, image_score(fused, score_fraction)


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel (align-corners-false) sampling."""
    if grid.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {grid.shape}")
    in_h, in_w = grid.shape
    if out_h < in_h or out_w < in_w:
        raise DataError(f"cannot upsample {in_h}x{in_w} to smaller {out_h}x{out_w}")
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def upsample_score_map(fused: ScoreMap, out_h: int, out_w: int) -> np.ndarray:
    return upsample_bilinear(fused.as_grid(), out_h, out_w)


@dataclass
class ResidualNormStats:
    """Residual-norm histograms split by ground-truth patch label."""

    edges: np.ndarray
    normal_counts: np.ndarray
    abnormal_counts: np.ndarray
    normal_mean: float
    abnormal_mean: float

    @property
    def total(self) -> int:
        return int(self.normal_counts.sum() + self.abnormal_counts.sum())


def residual_norm_stats(episodes: list[Episode], bins: int = 50) -> ResidualNormStats:
    """Bucket per-patch query-residual L2 norms by the query mask bit."""
    normal_norms, abnormal_norms = [], []
    for ep in episodes:
        res = residual(ep.query, ep.refs.normals)
        norms = res.norms()
        is_anom = ep.query_mask.bits.astype(bool)
        normal_norms.append(norms[~is_anom])
        abnormal_norms.append(norms[is_anom])
    normal_all = np.concatenate(normal_norms) if normal_norms else np.empty(0)
    abnormal_all = np.concatenate(abnormal_norms) if abnormal_norms else np.empty(0)
    hi = max(normal_all.max(initial=0.0), abnormal_all.max(initial=0.0), 1e-9)
    edges = np.linspace(0.0, float(hi), bins + 1)
    return ResidualNormStats(
        edges=edges,
        normal_counts=np.histogram(normal_all, bins=edges)[0],
        abnormal_counts=np.histogram(abnormal_all, bins=edges)[0],
        normal_mean=float(normal_all.mean()) if normal_all.size else 0.0,
        abnormal_mean=float(abnormal_all.mean()) if abnormal_all.size else 0.0,
    )


def test_episodes(
    manifest: DatasetManifest,
    sampler_cfg: SamplerConfig,
    cache: dict | None = None,
) -> list[Episode]:
    """Every test record paired with its frozen per-defect-type reference set."""
    rng = np.random.Generator(np.random.Philox(key=(sampler_cfg.seed, 0x7E57)))
    refsets = build_test_reference_sets(manifest, sampler_cfg, rng, cache=cache)
    index = _Index(manifest)
    return [
        episode_for_test_record(manifest, rec, refsets, sampler_cfg,
                                cache=cache, index=index)
        for rec in manifest.by_split("test")
    ]


def evaluate_model(
    params: ModelParams,
    manifest: DatasetManifest,
    sampler_cfg: SamplerConfig,
    fpr_limit: float = 0.3,
    pro_thresholds: int = 200,
    per_image_pixel_auroc: bool = False,
    score_fraction: float = 0.01,
    ablate_abnormal: bool = False,
    cache: dict | None = None,
) -> list[MetricReport]:
    """Score every test record with frozen reference sets and report metrics."""
    by_id = {r.image_id: r for r in manifest.by_split("test")}
    records = []
    for ep in test_episodes(manifest, sampler_cfg, cache=cache):
        rec = by_id[ep.query_id]
        fused, img_score = score_episode(params, ep, score_fraction, ablate_abnormal)
        records.append(EvalRecord(
            image_id=ep.query_id,
            category=ep.category,
            image_score=img_score,
            label=ep.label,
            score_map=upsample_score_map(fused, rec.image_h, rec.image_w),
            pixel_mask=expand_mask(ep.query_mask, rec.image_h, rec.image_w),
        ))
    return evaluate_run(records, fpr_limit, pro_thresholds, per_image_pixel_auroc)


def write_pgm(grid: np.ndarray, path: str | Path) -> None:
    """ASCII portable graymap, min-max scaled to 0..255."""
    if grid.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {grid.shape}")
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = np.round((grid - lo) / (hi - lo) * 255).astype(int)
    else:
        scaled = np.zeros_like(grid, dtype=int)
    h, w = grid.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_raw_grid(grid: np.ndarray, path: str | Path) -> None:
    """Raw float32 grid export, stored as a single-channel feature file."""
    h, w = grid.shape
    write_feature_file(
        PatchFeatureMap(h, w, 1, grid.reshape(-1, 1).astype(np.float32)), path
    )
