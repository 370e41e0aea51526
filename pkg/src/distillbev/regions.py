"""Foreground/background region decomposition and the imitation masks."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Region(IntEnum):
    TN = 0
    TP = 1
    FN = 2
    FP = 3


@dataclass(frozen=True)
class RegionPartition:
    label: np.ndarray  # H x W of Region values
    owner: np.ndarray  # H x W object index, -1 off TP/FN

    def count(self, region: Region) -> int:
        return int(np.count_nonzero(self.label == region))


@dataclass(frozen=True)
class RegionMask:
    m: np.ndarray
    m_bar: np.ndarray
    eta: float


def _class_max(heatmap: np.ndarray) -> np.ndarray:
    heatmap = np.asarray(heatmap, dtype=np.float64)
    return heatmap.max(axis=0) if heatmap.ndim == 3 else heatmap


def compute_fp_cells(h_teacher: np.ndarray, h_gt: np.ndarray, gamma: float) -> np.ndarray:
    """Cells where the teacher fires above ``gamma`` but ground truth stays below it.

    Multi-class heatmaps are reduced by max over classes first. Both
    comparisons are strict.
    """
    h_teacher = np.asarray(h_teacher)
    h_gt = np.asarray(h_gt)
    if h_teacher.shape != h_gt.shape:
        raise ValueError(f"heatmap shapes differ: {h_teacher.shape} vs {h_gt.shape}")
    return (_class_max(h_teacher) > gamma) & (_class_max(h_gt) < gamma)


def decompose(owner: np.ndarray, fp_cells: np.ndarray, h_teacher: np.ndarray, gamma: float) -> RegionPartition:
    owner = np.asarray(owner)
    t = _class_max(h_teacher)
    if owner.shape != fp_cells.shape or owner.shape != t.shape:
        raise ValueError("owner grid, FP grid and teacher heatmap must share a spatial shape")
    has_owner = owner >= 0
    label = np.full(owner.shape, Region.TN, dtype=np.int8)
    label[~has_owner & fp_cells] = Region.FP
    label[has_owner & (t > gamma)] = Region.TP
    label[has_owner & ~(t > gamma)] = Region.FN
    return RegionPartition(label=label, owner=np.where(has_owner, owner, -1))


def build_mask(partition: RegionPartition, eta: float, include_fp: bool) -> RegionMask:
    if eta < 0:
        raise ValueError("eta must be non-negative")
    label = partition.label
    m = np.zeros(label.shape)
    m[(label == Region.TP) | (label == Region.FN)] = 1.0
    if include_fp:
        m[label == Region.FP] = eta
    return RegionMask(m=m, m_bar=(m == 0).astype(np.float64), eta=eta)
