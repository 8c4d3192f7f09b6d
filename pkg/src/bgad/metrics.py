"""Detection and localization metrics, plus anomaly-map assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .objective import anomaly_score

MAX_THRESHOLDS = 5000
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


@dataclass
class AnomalyMap:
    scores: np.ndarray
    sample_id: str = ""


def _split_classes(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("AUROC needs both normal and abnormal samples")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney form: P(abnormal > normal) + P(tie)/2."""
    s, y = _split_classes(scores, labels)
    ranks = rankdata(s)  # average ranks resolve ties as half-wins
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> list[RocPoint]:
    """One point per distinct threshold, sweeping from high to low scores."""
    s, y = _split_classes(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    P, N = y.sum(), (~y).sum()
    pts = [RocPoint(float("inf"), 0.0, 0.0)]
    pts += [RocPoint(float(s[i]), float(tp[i] / P), float(fp[i] / N)) for i in last]
    return pts


def image_score(amap: AnomalyMap | np.ndarray) -> float:
    scores = amap.scores if isinstance(amap, AnomalyMap) else np.asarray(amap)
    if scores.size == 0:
        raise ValueError("empty anomaly map")
    return float(scores.max())


def upsample_bilinear(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize (edge-clamped), like ``align_corners=False``."""
    H, W = grid.shape
    Ho, Wo = shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(H, Ho)
    c0, c1, fc = axis(W, Wo)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def assemble_map(level_logps: dict[str, np.ndarray], image_shape: tuple[int, int],
                 smoothing_sigma: float = 4.0, logp_max: dict[str, float] | None = None,
                 sample_id: str = "") -> AnomalyMap:
    """Turn per-level log-likelihood grids into one pixel anomaly map.

    Each level is scored against ``logp_max[level]`` (the maximum over the
    whole scored set; defaults to this grid's own maximum), upsampled,
    averaged across levels, Gaussian-smoothed and clipped to ``[0, 1]``.
    """
    if not level_logps:
        raise ValueError("no levels supplied")
    acc = np.zeros(image_shape)
    for lvl, grid in level_logps.items():
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ValueError(f"level {lvl}: expected a 2D grid, got shape {grid.shape}")
        if grid.shape[0] > image_shape[0] or grid.shape[1] > image_shape[1]:
            raise ValueError(f"level {lvl}: grid {grid.shape} larger than image {image_shape}")
        top = grid.max() if logp_max is None else logp_max[lvl]
        acc += upsample_bilinear(anomaly_score(grid, top), image_shape)
    acc /= len(level_logps)
    if smoothing_sigma > 0:
        acc = ndimage.gaussian_filter(acc, sigma=smoothing_sigma, mode="reflect")
    return AnomalyMap(np.clip(acc, 0.0, 1.0), sample_id)


def pixel_auroc(maps, gt_masks) -> float:
    scores = np.concatenate([_scores(m).ravel() for m in maps])
    labels = np.concatenate([np.asarray(g, dtype=bool).ravel() for g in gt_masks])
    return auroc(scores, labels)


def _scores(m) -> np.ndarray:
    return np.asarray(m.scores if isinstance(m, AnomalyMap) else m, dtype=np.float64)


def pro_curve(maps, gt_masks, max_thresholds: int = MAX_THRESHOLDS):
    """``(fpr, mean_overlap)`` arrays for a descending threshold sweep.

    Regions are 8-connected components of the ground truth, pooled across
    all images; every region counts equally.  The sweep starts above the
    maximum score, i.e. at ``(0, 0)``.
    """
    scores = [_scores(m) for m in maps]
    masks = [np.asarray(g, dtype=bool) for g in gt_masks]
    if len(scores) != len(masks):
        raise ValueError("maps and masks differ in count")
    for s, g in zip(scores, masks):
        if s.shape != g.shape:
            raise ValueError(f"map shape {s.shape} != mask shape {g.shape}")

    region_of = []  # per image: region index per pixel, -1 for background
    region_sizes = []
    offset = 0
    for g in masks:
        lab, n = ndimage.label(g, structure=EIGHT_CONNECTED)
        ids = np.where(lab > 0, lab - 1 + offset, -1)
        region_of.append(ids.ravel())
        region_sizes.extend(np.bincount(lab.ravel(), minlength=n + 1)[1:].tolist())
        offset += n
    if offset == 0:
        raise ValueError("PRO needs at least one ground-truth region")

    flat = np.concatenate([s.ravel() for s in scores])
    regions = np.concatenate(region_of)
    sizes = np.asarray(region_sizes, dtype=np.float64)
    neg_total = np.count_nonzero(regions < 0)

    distinct = np.unique(flat)[::-1]
    if distinct.size > max_thresholds:
        distinct = np.unique(np.quantile(flat, np.linspace(1.0, 0.0, max_thresholds)))[::-1]

    # bucket every pixel by the first (highest) threshold it clears
    T = distinct.size
    bucket = np.searchsorted(-distinct, -flat, side="left")
    keep = bucket < T
    fp_counts = np.bincount(bucket[keep & (regions < 0)], minlength=T)
    hit = keep & (regions >= 0)
    tp_counts = np.zeros((T, offset))
    np.add.at(tp_counts, (bucket[hit], regions[hit]), 1.0)

    fp = np.cumsum(fp_counts)
    tp = np.cumsum(tp_counts, axis=0)
    fpr = fp / neg_total if neg_total else np.zeros(T)
    overlap = (tp / sizes[None, :]).mean(axis=1)
    return np.r_[0.0, fpr], np.r_[0.0, overlap]


def integrate_limited(fpr: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under ``y(fpr)`` on ``[0, limit]``, divided by ``limit``."""
    area = 0.0
    for i in range(1, fpr.size):
        x0, x1, y0, y1 = fpr[i - 1], fpr[i], y[i - 1], y[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / limit


def pro(maps, gt_masks, fpr_limit: float = 0.3, max_thresholds: int = MAX_THRESHOLDS) -> float:
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, overlap = pro_curve(maps, gt_masks, max_thresholds)
    return float(integrate_limited(fpr, overlap, fpr_limit))
