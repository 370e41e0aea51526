"""Deterministic synthetic BEV scenes standing in for a real driving dataset.

A scene is a static world of rotated boxes plus LiDAR-like point hits. The
teacher sees binned point counts; the student sees a blurred rendering of
the same points after a range-dependent radial displacement, a stand-in for
camera depth error.

Randomness comes from counter-based Philox streams keyed by
``(seed, stream)`` so each quantity is reproducible on its own.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from shapely.geometry import Polygon

from .geometry import BevBox, EgoPose, GridSpec, render_heatmap, wrap_angle

STREAM_BOXES = 1
STREAM_POINTS = 2
STREAM_STUDENT = 3
STREAM_TEACHER_HEAT = 4
STREAM_EGO = 5

TEACHER_CHANNELS = ("density", "occupancy")
STUDENT_CHANNELS = ("lifted_occupancy", "lifted_density")


def rng_for(seed: int, stream: int, sub: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream, sub])))


def derive_seed(base_seed: int, index: int) -> int:
    """Per-sample u64 seed, independent of generation order."""
    lo, hi = np.random.SeedSequence([int(base_seed), int(index)]).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    length: float
    width: float
    prob: float


DEFAULT_CLASSES = (
    ClassSpec("car", 4.5, 1.9, 0.55),
    ClassSpec("bus", 10.0, 2.8, 0.15),
    ClassSpec("pedestrian", 0.8, 0.8, 0.30),
)


@dataclass
class SceneConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(-16.0, 16.0, -16.0, 16.0, 32, 32))
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    box_count_min: int = 3
    box_count_max: int = 8
    size_jitter: float = 0.1
    max_iou: float = 0.5
    points_per_m2: float = 6.0
    range_falloff: float = 30.0
    clutter_points: float = 25.0
    world_margin: float = 8.0
    fp_rate: float = 1.0
    miss_rate: float = 0.1
    depth_noise: float = 0.06
    point_jitter: float = 0.3
    student_blur: float = 0.8
    student_noise: float = 0.02
    frames: int = 1
    ego_speed_min: float = 0.0
    ego_speed_max: float = 2.0

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        self.classes = tuple(ClassSpec(**c) if isinstance(c, dict) else c for c in self.classes)
        if not 0 <= self.miss_rate <= 1:
            raise ValueError("miss_rate must be a probability")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be non-negative")
        if self.box_count_min < 0 or self.box_count_max < self.box_count_min:
            raise ValueError("box count range invalid")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d


@dataclass
class SceneSample:
    boxes: list[BevBox]
    teacher_input: np.ndarray
    student_input: np.ndarray
    gt_heatmap: np.ndarray
    ego_pose: EgoPose
    seed: int
    grid: GridSpec


@dataclass
class _World:
    boxes: list[BevBox]
    points: np.ndarray  # N x 2 world coordinates
    owner: np.ndarray  # N, box index or -1 for clutter


def _box_iou(a: BevBox, b: BevBox) -> float:
    pa, pb = Polygon(a.corners()), Polygon(b.corners())
    inter = pa.intersection(pb).area
    return inter / (pa.area + pb.area - inter) if inter > 0 else 0.0


def _sample_world(config: SceneConfig, seed: int) -> _World:
    g = config.grid
    rng = rng_for(seed, STREAM_BOXES)
    n = int(rng.integers(config.box_count_min, config.box_count_max + 1))
    probs = np.array([c.prob for c in config.classes], dtype=np.float64)
    probs /= probs.sum()
    boxes: list[BevBox] = []
    for _ in range(n):
        for _attempt in range(20):
            k = int(rng.choice(len(config.classes), p=probs))
            spec = config.classes[k]
            jl, jw = 1.0 + config.size_jitter * rng.uniform(-1, 1, size=2)
            cx = rng.uniform(g.x_min + 1.0, g.x_max - 1.0)
            cy = rng.uniform(g.y_min + 1.0, g.y_max - 1.0)
            yaw = wrap_angle(rng.uniform(-math.pi, math.pi))
            box = BevBox(float(cx), float(cy), spec.length * jl, spec.width * jw, yaw, k)
            if all(_box_iou(box, o) <= config.max_iou for o in boxes):
                boxes.append(box)
                break

    prng = rng_for(seed, STREAM_POINTS)
    pts, own = [], []
    for k, box in enumerate(boxes):
        r = math.hypot(box.cx, box.cy)
        lam = config.points_per_m2 * box.area * math.exp(-r / config.range_falloff)
        m = max(1, int(prng.poisson(lam)))
        uv = prng.uniform(-0.5, 0.5, size=(m, 2)) * np.array([box.length, box.width])
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        xy = uv @ np.array([[c, s], [-s, c]]) + np.array([box.cx, box.cy])
        pts.append(xy)
        own.append(np.full(m, k))
    span_x = (g.x_min - config.world_margin, g.x_max + config.world_margin)
    span_y = (g.y_min - config.world_margin, g.y_max + config.world_margin)
    area_ratio = ((span_x[1] - span_x[0]) * (span_y[1] - span_y[0])) / ((g.x_max - g.x_min) * (g.y_max - g.y_min))
    m = int(prng.poisson(config.clutter_points * area_ratio))
    clutter = np.column_stack([prng.uniform(*span_x, size=m), prng.uniform(*span_y, size=m)])
    pts.append(clutter)
    own.append(np.full(m, -1))
    return _World(boxes, np.concatenate(pts) if pts else np.zeros((0, 2)), np.concatenate(own).astype(np.int64))


def _bin_counts(x: np.ndarray, y: np.ndarray, grid: GridSpec) -> np.ndarray:
    row, col = grid.cell_of(x, y)
    ok = (row >= 0) & (row < grid.cells_y) & (col >= 0) & (col < grid.cells_x)
    counts = np.zeros(grid.shape)
    np.add.at(counts, (row[ok], col[ok]), 1.0)
    return counts


def _render_frame(world: _World, pose: EgoPose, config: SceneConfig, seed: int, frame: int) -> SceneSample:
    g = config.grid
    x, y = pose.from_world(world.points[:, 0], world.points[:, 1])
    counts = _bin_counts(x, y, g)
    teacher = np.stack([np.log1p(counts), (counts > 0).astype(np.float64)])

    srng = rng_for(seed, STREAM_STUDENT, frame)
    # one depth error per object (and per clutter point), growing with range
    obj_err = srng.normal(0.0, 1.0, size=len(world.boxes))
    pt_err = srng.normal(0.0, 1.0, size=len(x))
    err = np.where(world.owner >= 0, obj_err[np.maximum(world.owner, 0)] if len(world.boxes) else 0.0, pt_err)
    scale = 1.0 + config.depth_noise * err
    jitter = srng.normal(0.0, config.point_jitter, size=(len(x), 2))
    sx, sy = x * scale + jitter[:, 0], y * scale + jitter[:, 1]
    s_counts = _bin_counts(sx, sy, g)
    s_occ = gaussian_filter((s_counts > 0).astype(np.float64), config.student_blur, mode="constant")
    s_den = gaussian_filter(np.log1p(s_counts), config.student_blur, mode="constant")
    student = np.stack([s_occ, s_den])
    student = student + config.student_noise * srng.normal(size=student.shape)

    boxes = []
    for b in world.boxes:
        cx, cy = pose.from_world(b.cx, b.cy)
        cx, cy = float(cx), float(cy)
        if g.x_min <= cx < g.x_max and g.y_min <= cy < g.y_max:
            boxes.append(BevBox(cx, cy, b.length, b.width, wrap_angle(b.yaw - pose.heading), b.class_id))
    heat = render_heatmap(boxes, g, config.num_classes)
    return SceneSample(boxes, _f32(teacher), _f32(student), _f32(heat), pose, int(seed), g)


def generate_scene(config: SceneConfig, seed: int) -> SceneSample:
    return _render_frame(_sample_world(config, seed), EgoPose(), config, seed, 0)


def generate_sequence(config: SceneConfig, seed: int, speed: float | None = None) -> list[SceneSample]:
    """``config.frames`` frames of one static world seen from a moving ego.

    The ego starts at the world origin heading +x and advances ``speed``
    meters per frame (drawn from the configured range when not given).
    """
    world = _sample_world(config, seed)
    if speed is None:
        speed = float(rng_for(seed, STREAM_EGO).uniform(config.ego_speed_min, config.ego_speed_max))
    return [_render_frame(world, EgoPose(speed * t, 0.0, 0.0), config, seed, t) for t in range(config.frames)]


def simulate_teacher_heatmap(gt: np.ndarray, boxes: list[BevBox], grid: GridSpec, fp_rate: float,
                             miss_rate: float, seed: int, min_distance: float = 4.0) -> np.ndarray:
    """Ground truth with random misses and injected false-positive blobs.

    Each object's Gaussian is dropped with probability ``miss_rate``; a
    Poisson(``fp_rate``) number of blobs with peaks in [0.3, 0.9] land at
    cells at least ``min_distance`` meters from every box center.
    """
    if not 0 <= miss_rate <= 1 or fp_rate < 0:
        raise ValueError("rates out of range")
    gt = np.asarray(gt, dtype=np.float64)
    rng = rng_for(seed, STREAM_TEACHER_HEAT)
    keep = rng.uniform(size=len(boxes)) >= miss_rate
    if keep.all():
        heat = gt.copy()
    else:
        heat = render_heatmap([b for b, k in zip(boxes, keep) if k], grid, gt.shape[0])
    n_fp = int(rng.poisson(fp_rate)) if fp_rate > 0 else 0
    if n_fp == 0:
        return heat
    xs, ys = grid.centers()
    free = np.ones(grid.shape, dtype=bool)
    for b in boxes:
        free &= np.hypot(xs - b.cx, ys - b.cy) >= min_distance
    cand = np.flatnonzero(free)
    for _ in range(n_fp):
        if cand.size == 0:
            break
        cell = int(cand[rng.integers(cand.size)])
        peak = rng.uniform(0.3, 0.9)
        sigma = grid.cell_size * rng.uniform(1.0, 2.0)
        k = int(rng.integers(gt.shape[0]))
        cx, cy = xs.flat[cell], ys.flat[cell]
        blob = peak * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma * sigma))
        np.maximum(heat[k], blob, out=heat[k])
    return heat


def scene_teacher_heatmap(sample: SceneSample, config: SceneConfig) -> np.ndarray:
    return simulate_teacher_heatmap(sample.gt_heatmap, sample.boxes, sample.grid, config.fp_rate,
                                    config.miss_rate, sample.seed)
