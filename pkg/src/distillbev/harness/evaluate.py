"""Peak-based detection scoring on BEV heatmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from ..geometry import BevBox, GridSpec

PEAK_FLOOR = 0.05
MATCH_CELLS = 2.0


@dataclass(frozen=True)
class Detection:
    scene: int
    class_id: int
    x: float
    y: float
    score: float


def extract_peaks(heatmap: np.ndarray, grid: GridSpec, scene: int = 0, floor: float = PEAK_FLOOR) -> list[Detection]:
    """3x3 local maxima above ``floor``, placed at their cell centers.

    ``grid`` must describe the heatmap's own resolution.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    dets = []
    xs, ys = grid.centers()
    for k in range(heatmap.shape[0]):
        h = heatmap[k]
        peak = (h == maximum_filter(h, size=3, mode="constant", cval=-np.inf)) & (h > floor)
        for r, c in zip(*np.nonzero(peak)):
            dets.append(Detection(scene, k, float(xs[r, c]), float(ys[r, c]), float(h[r, c])))
    return dets


def _greedy_match(dets: list[Detection], gts: dict[int, np.ndarray], radius: float) -> np.ndarray:
    """TP flag per detection, processed in the given order."""
    used = {s: np.zeros(len(g), dtype=bool) for s, g in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        g = gts.get(d.scene)
        if g is None or len(g) == 0:
            continue
        dist = np.hypot(g[:, 0] - d.x, g[:, 1] - d.y)
        dist[used[d.scene]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= radius:
            used[d.scene][j] = True
            tp[i] = True
    return tp


def average_precision(dets: list[Detection], gt_centers: dict[int, np.ndarray], radius: float) -> float:
    """AP for one class: precision summed over recall steps.

    Detections are ranked by score; tied scores enter together, exactly as
    a sweep over the distinct score thresholds would admit them.
    """
    n_gt = sum(len(g) for g in gt_centers.values())
    if n_gt == 0:
        return float("nan")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    ranked = [dets[i] for i in order]
    tp = _greedy_match(ranked, gt_centers, radius)
    scores = np.array([d.score for d in ranked])
    cum_tp = np.cumsum(tp)
    # last index of each distinct-score group
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    ap, prev_recall = 0.0, 0.0
    for e in ends:
        recall = cum_tp[e] / n_gt
        precision = cum_tp[e] / (e + 1)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def synthetic_ap(heatmaps: list[np.ndarray], grids: list[GridSpec], boxes: list[list[BevBox]],
                 num_classes: int, match_cell: float) -> float:
    """Mean over classes (with at least one object) of per-class AP.

    ``match_cell`` is the metric cell size the 2-cell match radius refers to.
    """
    radius = MATCH_CELLS * match_cell
    dets = [d for i, (h, g) in enumerate(zip(heatmaps, grids)) for d in extract_peaks(h, g, scene=i)]
    aps = []
    for k in range(num_classes):
        gts = {i: np.array([[b.cx, b.cy] for b in bs if b.class_id == k]).reshape(-1, 2)
               for i, bs in enumerate(boxes)}
        ap = average_precision([d for d in dets if d.class_id == k], gts, radius)
        if not np.isnan(ap):
            aps.append(ap)
    return float(np.mean(aps)) if aps else 0.0
