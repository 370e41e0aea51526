"""BEV grid, rotated boxes, Gaussian center heatmaps and ego-motion warping.

Array layout convention: a grid array is indexed ``[row, col]`` where the
row follows +y (row 0 at ``y_min``) and the column follows +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cells_x: int
    cells_y: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid extent must be positive along both axes")
        if self.cells_x < 1 or self.cells_y < 1:
            raise ValueError("grid must have at least one cell per axis")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.cells_x

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.cells_y

    @property
    def cell_size(self) -> float:
        return max(self.dx, self.dy)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cells_y, self.cells_x)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of every cell center, each shaped (cells_y, cells_x)."""
        xs = self.x_min + (np.arange(self.cells_x) + 0.5) * self.dx
        ys = self.y_min + (np.arange(self.cells_y) + 0.5) * self.dy
        return np.meshgrid(xs, ys)

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) of the cell containing metric points; may be out of range."""
        col = np.floor((np.asarray(x) - self.x_min) / self.dx).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y_min) / self.dy).astype(np.int64)
        return row, col

    def scaled(self, cells_y: int, cells_x: int) -> "GridSpec":
        """Same metric extent at another resolution."""
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, cells_x, cells_y)


@dataclass(frozen=True)
class BevBox:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    class_id: int

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box length and width must be positive")
        if not -math.pi < self.yaw <= math.pi:
            raise ValueError(f"yaw {self.yaw} outside (-pi, pi]")

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        """4 x 2 corner coordinates, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass(frozen=True)
class EgoPose:
    tx: float = 0.0
    ty: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        if not -math.pi < self.heading <= math.pi:
            raise ValueError(f"heading {self.heading} outside (-pi, pi]")

    def to_world(self, x, y):
        c, s = math.cos(self.heading), math.sin(self.heading)
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        return c * x - s * y + self.tx, s * x + c * y + self.ty

    def from_world(self, x, y):
        c, s = math.cos(self.heading), math.sin(self.heading)
        x = np.asarray(x, dtype=np.float64) - self.tx
        y = np.asarray(y, dtype=np.float64) - self.ty
        return c * x + s * y, -s * x + c * y


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


def inside_box(box: BevBox, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = x - box.cx, y - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.length / 2) & (np.abs(v) <= box.width / 2)


def rasterize_boxes(boxes: list[BevBox], grid: GridSpec) -> np.ndarray:
    """Owner index per cell (-1 where no box covers the cell center).

    Overlaps go to the box with the smaller metric area (earlier index on
    equal area). A box whose footprint misses every cell center still gets
    the cell containing its center, when that cell is on the grid.
    """
    owner = np.full(grid.shape, -1, dtype=np.int64)
    if not boxes:
        return owner
    xs, ys = grid.centers()
    order = sorted(range(len(boxes)), key=lambda k: (boxes[k].area, k), reverse=True)
    for k in order:
        owner[inside_box(boxes[k], xs, ys)] = k
    counts = np.bincount(owner[owner >= 0], minlength=len(boxes))
    for k in sorted(range(len(boxes)), key=lambda k: (boxes[k].area, k), reverse=True):
        if counts[k] == 0:
            r, c = grid.cell_of(boxes[k].cx, boxes[k].cy)
            if 0 <= r < grid.cells_y and 0 <= c < grid.cells_x:
                owner[r, c] = k
    return owner


def gaussian_sigma(box: BevBox, grid: GridSpec) -> float:
    return max(0.2 * min(box.length, box.width), grid.cell_size)


def render_heatmap(boxes: list[BevBox], grid: GridSpec, num_classes: int) -> np.ndarray:
    """K x H x W center heatmap; overlapping Gaussians combine by max."""
    heat = np.zeros((num_classes,) + grid.shape)
    xs, ys = grid.centers()
    for box in boxes:
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"class_id {box.class_id} outside [0, {num_classes})")
        sigma = gaussian_sigma(box, grid)
        d2 = (xs - box.cx) ** 2 + (ys - box.cy) ** 2
        np.maximum(heat[box.class_id], np.exp(-d2 / (2 * sigma * sigma)), out=heat[box.class_id])
    return heat


def warp_index(from_pose: EgoPose, to_pose: EgoPose, grid: GridSpec) -> np.ndarray:
    """Flat source-cell index for every target cell, -1 where it falls outside."""
    xs, ys = grid.centers()
    wx, wy = to_pose.to_world(xs, ys)
    sx, sy = from_pose.from_world(wx, wy)
    row, col = grid.cell_of(sx, sy)
    ok = (row >= 0) & (row < grid.cells_y) & (col >= 0) & (col < grid.cells_x)
    return np.where(ok, row * grid.cells_x + col, -1)


def warp_bev(feature: np.ndarray, from_pose: EgoPose, to_pose: EgoPose, grid: GridSpec) -> np.ndarray:
    """Resample a C x H x W map from ``from_pose``'s frame into ``to_pose``'s frame.

    Nearest-neighbour; target cells with no source cell are zero.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[1:] != grid.shape:
        raise ValueError(f"feature spatial shape {feature.shape[1:]} != grid {grid.shape}")
    idx = warp_index(from_pose, to_pose, grid).reshape(-1)
    c = feature.shape[0]
    flat = feature.reshape(c, -1)
    out = np.zeros_like(flat)
    valid = idx >= 0
    out[:, valid] = flat[:, idx[valid]]
    return out.reshape(feature.shape)
