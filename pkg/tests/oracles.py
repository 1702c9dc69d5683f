"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately written as plain loops over definitions,
sharing no code with the package paths it checks.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(fn, tensor, step=1e-4):
    """Central finite differences of a scalar-valued fn w.r.t. one tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def gradcheck_violation(analytic, numeric, rtol=1e-4, atol=1e-11):
    """Worst violation of |a-n| <= atol + rtol*|a| (negative means pass).

    The absolute floor sits above the float64 central-difference noise
    (~3e-12 at step 1e-4 for order-one losses) and far below any
    signal-scale error a wrong backward rule would produce.
    """
    return float(np.max(np.abs(analytic - numeric) - (atol + rtol * np.abs(analytic))))


def nn_double_loop(queries: np.ndarray, bank: np.ndarray):
    """O(L^2) exact nearest neighbor by scalar loops over cosine distance."""
    indices = np.zeros(len(queries), dtype=np.int64)
    distances = np.zeros(len(queries))
    for i, q in enumerate(queries):
        best_d, best_j = None, None
        for j, n in enumerate(bank):
            d = min(max(1.0 - float(np.dot(q, n)), 0.0), 1.0)
            if best_d is None or d < best_d:
                best_d, best_j = d, j
        indices[i] = best_j
        distances[i] = best_d
    return indices, distances


def auroc_pairwise(scores, labels):
    """Concordant-pair counting with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def _confusion_at(scores, labels, th):
    tp = sum(1 for s, y in zip(scores, labels) if s >= th and y == 1)
    fp = sum(1 for s, y in zip(scores, labels) if s >= th and y == 0)
    fn = sum(1 for s, y in zip(scores, labels) if s < th and y == 1)
    return tp, fp, fn


def ap_threshold_enum(scores, labels):
    """AP by enumerating every distinct score as a threshold, descending."""
    total_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for th in sorted(set(scores), reverse=True):
        tp, fp, _ = _confusion_at(scores, labels, th)
        recall = tp / total_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_threshold_enum(scores, labels):
    best = 0.0
    for th in sorted(set(scores), reverse=True):
        tp, fp, fn = _confusion_at(scores, labels, th)
        if 2 * tp + fp + fn > 0:
            best = max(best, 2.0 * tp / (2 * tp + fp + fn))
    return best


def regions_8conn(mask):
    """Connected components by repeated flood fill with explicit recursion."""
    binary = (np.asarray(mask) != 0)
    h, w = binary.shape
    seen = np.zeros_like(binary)
    out = []
    for i in range(h):
        for j in range(w):
            if binary[i, j] and not seen[i, j]:
                stack, coords = [(i, j)], []
                seen[i, j] = True
                while stack:
                    r, c = stack.pop()
                    coords.append((r, c))
                    for rr in range(max(0, r - 1), min(h, r + 2)):
                        for cc in range(max(0, c - 1), min(w, c + 2)):
                            if binary[rr, cc] and not seen[rr, cc]:
                                seen[rr, cc] = True
                                stack.append((rr, cc))
                out.append(coords)
    return out


def pro_dense(score_map, gt_mask, fpr_limit=0.3, n_thresholds=10_000):
    """Dense-threshold region-overlap curve with trapezoid integration."""
    regions = regions_8conn(gt_mask)
    normal = np.asarray(gt_mask) == 0
    n_normal = int(normal.sum())
    points = [(0.0, 0.0)]
    for th in np.linspace(score_map.max(), score_map.min(), n_thresholds):
        pred = score_map >= th
        recalls = []
        for coords in regions:
            hits = sum(1 for r, c in coords if pred[r, c])
            recalls.append(hits / len(coords))
        fpr = float((pred & normal).sum()) / n_normal
        points.append((fpr, float(np.mean(recalls))))
    points.sort()
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= fpr_limit:
            break
        if x1 <= x0:
            continue
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / fpr_limit


def attention_straight_line(x, wq, wk, wv, wo):
    """Hand-rolled single-head self-attention with residual connection."""
    q = x @ wq
    k = x @ wk
    v = x @ wv
    logits = q @ k.T / np.sqrt(x.shape[1])
    weights = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        row = logits[i] - logits[i].max()
        e = np.exp(row)
        weights[i] = e / e.sum()
    return (weights @ v) @ wo + x


def masked_cross_attention_straight_line(proxies, wq, keys, wk, values, wv,
                                         mask_bits, alpha, d):
    """Scalar-loop masked cross attention producing the pre-SA aggregate."""
    q = proxies @ wq
    k = keys @ wk
    v = values @ wv
    logits = q @ k.T / np.sqrt(d) + alpha * (1.0 - mask_bits)[None, :]
    weights = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        row = logits[i] - logits[i].max()
        e = np.exp(row)
        weights[i] = e / e.sum()
    return weights @ v


def top_fraction_mean_sort(values, fraction):
    """Sort-and-average reference for the top-fraction mean."""
    v = list(values)
    k = max(1, int(np.ceil(fraction * len(v))))
    return float(np.mean(sorted(v, reverse=True)[:k]))


def bilinear_reference(grid, out_h, out_w):
    """Per-pixel half-pixel-offset bilinear interpolation, scalar loops.

    Source coordinates are clamped into the grid before interpolating,
    which matches the edge behavior of weight-clipped implementations.
    """
    in_h, in_w = grid.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            dy, dx = y - y0, x - x0
            top = grid[y0, x0] * (1 - dx) + grid[y0, x1] * dx
            bot = grid[y1, x0] * (1 - dx) + grid[y1, x1] * dx
            out[i, j] = top * (1 - dy) + bot * dy
    return out


def unit_rows(rng, n, c):
    """Random row-normalized matrix (zero rows impossible in practice)."""
    x = rng.normal(size=(n, c))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
