"""Per-cell scaling that keeps large objects and big regions from dominating."""
from __future__ import annotations

import math

import numpy as np

from .geometry import BevBox, GridSpec
from .regions import Region, RegionPartition


def box_extent_cells(box: BevBox, grid: GridSpec) -> tuple[float, float]:
    """Box length and width in grid cells, each clamped below at 1."""
    return max(box.length / grid.dx, 1.0), max(box.width / grid.dy, 1.0)


def compute_scaling(partition: RegionPartition, boxes: list[BevBox], grid: GridSpec) -> np.ndarray:
    """Scaling map S.

    Cells of object k get ``1/sqrt(h_k w_k)`` with the extents measured in
    cells of ``grid``; FP and TN cells get the reciprocal of their region's
    cell count.
    """
    label, owner = partition.label, partition.owner
    s = np.zeros(label.shape)
    fg = owner >= 0
    if fg.any():
        if owner.max() >= len(boxes):
            raise ValueError("partition references a box index beyond the box list")
        inv = np.array([1.0 / math.sqrt(h * w) for h, w in (box_extent_cells(b, grid) for b in boxes)])
        s[fg] = inv[owner[fg]]
    for region in (Region.FP, Region.TN):
        cells = label == region
        n = int(np.count_nonzero(cells))
        if n:
            s[cells] = 1.0 / n
    return s
