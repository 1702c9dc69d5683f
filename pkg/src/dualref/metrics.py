"""Image- and pixel-level evaluation: AUROC, AP, F1-max, and per-region overlap.

AUROC uses the rank statistic with average ranks for ties. AP and F1-max
sweep the distinct score values as thresholds (predict positive at
score >= t). PRO labels ground-truth regions with 8-connectivity, sweeps
evenly spaced thresholds, and integrates mean per-region recall over the
false-positive rate up to a cap.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise DataError(
                f"scores {self.scores.shape} and labels {self.labels.shape} "
                "must be equal-length vectors"
            )
        if not np.isfinite(self.scores).all():
            raise DataError("scores must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0/1")

    def require_both_classes(self) -> None:
        pos = int(self.labels.sum())
        if pos == 0 or pos == len(self.labels):
            raise DataError("need at least one positive and one negative sample")


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scored: ScoredSet) -> float:
    scored.require_both_classes()
    ranks = _average_ranks(scored.scores)
    pos = scored.labels == 1
    p = int(pos.sum())
    n = len(scored.labels) - p
    return float((ranks[pos].sum() - p * (p + 1) / 2.0) / (p * n))


def _threshold_sweep(scored: ScoredSet):
    """Yield (tp, fp) after each distinct descending score threshold."""
    order = np.argsort(-scored.scores, kind="stable")
    scores = scored.scores[order]
    labels = scored.labels[order]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[j + 1] == scores[i]:
            j += 1
        group = labels[i:j + 1]
        tp += int(group.sum())
        fp += int(len(group) - group.sum())
        yield tp, fp
        i = j + 1


def average_precision(scored: ScoredSet) -> float:
    scored.require_both_classes()
    total_pos = int(scored.labels.sum())
    ap = 0.0
    prev_recall = 0.0
    for tp, fp in _threshold_sweep(scored):
        recall = tp / total_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def f1_max(scored: ScoredSet) -> float:
    scored.require_both_classes()
    total_pos = int(scored.labels.sum())
    best = 0.0
    for tp, fp in _threshold_sweep(scored):
        fn = total_pos - tp
        denom = 2 * tp + fp + fn
        if denom > 0:
            best = max(best, 2.0 * tp / denom)
    return float(best)


def label_regions(mask: np.ndarray) -> list[np.ndarray]:
    """Connected components of a binary mask under 8-connectivity.

    Returns one (n_i, 2) array of (row, col) pixel coordinates per region.
    """
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    binary = mask != 0
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    regions = []
    for sr in range(h):
        for sc in range(w):
            if not binary[sr, sc] or seen[sr, sc]:
                continue
            queue = deque([(sr, sc)])
            seen[sr, sc] = True
            coords = []
            while queue:
                r, c = queue.popleft()
                coords.append((r, c))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and binary[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            queue.append((rr, cc))
            regions.append(np.array(coords, dtype=np.int64))
    return regions


def pro(
    score_map: np.ndarray,
    gt_mask: np.ndarray,
    fpr_limit: float = 0.3,
    thresholds: int = 200,
) -> float:
    """Area under mean per-region recall vs FPR, capped and normalized."""
    if score_map.shape != gt_mask.shape:
        raise DataError(f"shape mismatch: scores {score_map.shape} vs mask {gt_mask.shape}")
    if not 0.0 < fpr_limit <= 1.0:
        raise DataError(f"fpr_limit must be in (0,1], got {fpr_limit}")
    regions = label_regions(gt_mask)
    if not regions:
        raise DataError("ground-truth mask has no anomalous region")
    normal = gt_mask == 0
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise DataError("ground-truth mask has no normal pixels")
    region_scores = [score_map[r[:, 0], r[:, 1]] for r in regions]
    normal_scores = score_map[normal]
    curve = [(0.0, 0.0)]
    for th in np.linspace(score_map.max(), score_map.min(), thresholds):
        recalls = [float((rs >= th).mean()) for rs in region_scores]
        fpr = float((normal_scores >= th).sum()) / n_normal
        curve.append((fpr, float(np.mean(recalls))))
    return integrate_capped_curve(curve, fpr_limit)


def integrate_capped_curve(curve: list[tuple[float, float]], cap: float) -> float:
    """Trapezoid integral of a monotone (x, y) staircase over [0, cap] / cap."""
    pts = sorted(curve)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= cap:
            break
        if x1 <= x0:
            continue
        if x1 > cap:  # linear interpolation at the cap
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / cap


@dataclass
class EvalRecord:
    """One scored test image: image-level score plus pixel-level maps."""

    image_id: str
    category: str
    image_score: float
    label: int
    score_map: np.ndarray | None = None  # (H, W)
    pixel_mask: np.ndarray | None = None  # (H, W) binary


@dataclass
class MetricReport:
    category: str
    image_auroc: float
    image_ap: float
    image_f1: float
    pixel_auroc: float
    pixel_pro: float
    pixel_f1: float

    def values(self) -> list[float]:
        return [self.image_auroc, self.image_ap, self.image_f1,
                self.pixel_auroc, self.pixel_pro, self.pixel_f1]

    @staticmethod
    def metric_names() -> list[str]:
        return ["img_auroc", "img_ap", "img_f1max",
                "pix_auroc", "pix_pro", "pix_f1max"]


def evaluate_category(
    records: list[EvalRecord],
    fpr_limit: float = 0.3,
    pro_thresholds: int = 200,
    per_image_pixel_auroc: bool = False,
) -> MetricReport:
    if not records:
        raise DataError("no records to evaluate")
    image_set = ScoredSet(
        np.array([r.image_score for r in records], dtype=np.float64),
        np.array([r.label for r in records], dtype=np.int64),
    )
    with_pixels = [r for r in records if r.score_map is not None and r.pixel_mask is not None]
    if not with_pixels:
        raise DataError(f"category {records[0].category!r}: no pixel maps to evaluate")
    pooled = ScoredSet(
        np.concatenate([r.score_map.reshape(-1) for r in with_pixels]).astype(np.float64),
        np.concatenate([(r.pixel_mask != 0).reshape(-1) for r in with_pixels]).astype(np.int64),
    )
    if per_image_pixel_auroc:
        per_img = [
            auroc(ScoredSet(r.score_map.reshape(-1).astype(np.float64),
                            (r.pixel_mask != 0).reshape(-1).astype(np.int64)))
            for r in with_pixels
            if 0 < (r.pixel_mask != 0).sum() < r.pixel_mask.size
        ]
        pixel_auroc = float(np.mean(per_img))
    else:
        pixel_auroc = auroc(pooled)
    pros = [
        pro(r.score_map, r.pixel_mask, fpr_limit, pro_thresholds)
        for r in with_pixels if (r.pixel_mask != 0).any()
    ]
    if not pros:
        raise DataError(f"category {records[0].category!r}: no abnormal pixel masks")
    return MetricReport(
        category=records[0].category,
        image_auroc=auroc(image_set),
        image_ap=average_precision(image_set),
        image_f1=f1_max(image_set),
        pixel_auroc=pixel_auroc,
        pixel_pro=float(np.mean(pros)),
        pixel_f1=f1_max(pooled),
    )


def evaluate_run(
    records: list[EvalRecord],
    fpr_limit: float = 0.3,
    pro_thresholds: int = 200,
    per_image_pixel_auroc: bool = False,
) -> list[MetricReport]:
    """Per-category six-metric reports plus a mean row across categories."""
    by_cat: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_cat.setdefault(r.category, []).append(r)
    reports = [
        evaluate_category(by_cat[cat], fpr_limit, pro_thresholds, per_image_pixel_auroc)
        for cat in sorted(by_cat)
    ]
    mean = MetricReport(
        "MEAN", *[float(np.mean([rep.values()[i] for rep in reports])) for i in range(6)]
    )
    return reports + [mean]


def aggregate_seed_reports(
    runs: list[list[MetricReport]],
) -> list[tuple[str, list[float], list[float]]]:
    """Combine per-seed reports into (category, means, stds) rows."""
    if not runs:
        raise DataError("no runs to aggregate")
    cats = [rep.category for rep in runs[0]]
    for run in runs:
        if [rep.category for rep in run] != cats:
            raise DataError("seed runs cover different categories")
    rows = []
    for i, cat in enumerate(cats):
        stacked = np.array([[rep.values()[j] for j in range(6)] for rep in
                            (run[i] for run in runs)])
        rows.append((cat, stacked.mean(axis=0).tolist(), stacked.std(axis=0).tolist()))
    return rows


def render_report_table(rows: list[tuple[str, list[float], list[float] | None]]) -> str:
    """Aligned text table; columns mirror image-level then pixel-level metrics."""
    header = (
        f"{'category':<16} | {'img AUROC':>10} {'img AP':>10} {'img F1max':>10} | "
        f"{'pix AUROC':>10} {'pix PRO':>10} {'pix F1max':>10}"
    )
    lines = [header, "-" * len(header)]
    for cat, means, stds in rows:
        if stds is None:
            cells = [f"{v:10.4f}" for v in means]
        else:
            cells = [f"{v:.3f}±{s:.3f}" for v, s in zip(means, stds)]
            cells = [f"{c:>10}" for c in cells]
        lines.append(f"{cat:<16} | {cells[0]} {cells[1]} {cells[2]} | "
                     f"{cells[3]} {cells[4]} {cells[5]}")
    return "\n".join(lines)


def report_lines(rows: list[tuple[str, list[float], list[float] | None]]) -> str:
    """Machine-readable TSV: category, metric, mean, std."""
    out = []
    names = MetricReport.metric_names()
    for cat, means, stds in rows:
        for name, mean_v, std_v in zip(names, means, stds or [0.0] * 6):
            out.append(f"{cat}\t{name}\t{mean_v:.6f}\t{std_v:.6f}")
    return "".join(line + "\n" for line in out)
