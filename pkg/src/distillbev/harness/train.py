"""Teacher pre-training, student training with or without distillation, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .. import checkpoint
from .. import tensor as T
from ..attention import AdaptationModule, adapt_student
from ..geometry import GridSpec, render_heatmap, warp_index
from ..losses import DistillConfig, DistillTarget, LayerPair, total_distill_loss
from ..scene import SceneSample
from ..tensor import Tensor
from .evaluate import synthetic_ap
from .networks import ToyNetwork, make_student, make_teacher
from .optim import AdamW

log = logging.getLogger(__name__)

DISTILL_LAYERS = ("B1", "B2", "H")
METRIC_COLUMNS = ("epoch", "det_loss", "l_dist", "feature_mse_to_teacher", "synthetic_ap")
LAYER_COLUMNS = ("step", "layer_id", "l_feat", "l_attn")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-4
    weight_decay: float = 0.01
    cosine: bool = True
    seed: int = 0
    distill: bool = True
    inherit_head: bool = True
    distill_weight: float = 1.0
    temporal: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class StudentBundle:
    """Student network plus its adaptation modules, keyed by teacher layer."""

    net: ToyNetwork
    pairs: list[LayerPair]

    def parameters(self) -> list[Tensor]:
        return self.net.parameters() + [p for pair in self.pairs for p in pair.module.parameters()]

    def state(self) -> dict[str, np.ndarray]:
        out = self.net.state()
        for pair in self.pairs:
            pre = f"adapter.{pair.teacher_layer}"
            m = pair.module
            out[f"{pre}.meta"] = np.array([1.0 if m.kind == "prehead" else 0.0, m.upsample, len(m.blocks),
                                           float(pair.include_fp)])
            out.update(m.state(pre))
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.state())

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray]) -> "StudentBundle":
        net = ToyNetwork.from_state("student", arrays)
        pairs = []
        for layer in DISTILL_LAYERS:
            meta = arrays.get(f"adapter.{layer}.meta")
            if meta is None:
                continue
            kind = "prehead" if meta[0] == 1.0 else "intermediate"
            c_in = arrays[f"adapter.{layer}.block0.weight"].shape[1]
            c_out = arrays[f"adapter.{layer}.block0.weight"].shape[0]
            m = AdaptationModule.create(kind, c_in, c_out, upsample=int(meta[1]), num_blocks=int(meta[2]))
            m.load_state(f"adapter.{layer}", arrays)
            pairs.append(LayerPair(layer, layer, m, include_fp=bool(meta[3])))
        return cls(net, pairs)


def default_pairs(teacher: ToyNetwork, student: ToyNetwork, seed: int) -> list[LayerPair]:
    """B1, B2 through upsample + 3 blocks; H through upsample + 2 blocks with FP regions."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 91])))
    up = student.downsample // teacher.downsample
    idx = {"B1": 1, "B2": 2, "H": 3}
    pairs = []
    for layer in DISTILL_LAYERS:
        kind = "prehead" if layer == "H" else "intermediate"
        c_s, c_t = student.widths[idx[layer]], teacher.widths[idx[layer]]
        pairs.append(LayerPair(layer, layer, AdaptationModule.create(kind, c_s, c_t, upsample=up, rng=rng),
                               include_fp=(layer == "H")))
    return pairs


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at step {step}")


def _order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 13, epoch]))).permutation(n)


# teacher ----------------------------------------------------------------------

def heatmap_mse(net: ToyNetwork, samples: list[SceneSample]) -> float:
    errs = [float(np.mean((net.forward(s.teacher_input, training=False)["heatmap"].data - s.gt_heatmap) ** 2))
            for s in samples]
    return float(np.mean(errs))


def train_teacher(samples: list[SceneSample], config: TrainConfig) -> tuple[ToyNetwork, list[float]]:
    """Fit the teacher's heatmap to ground truth; returns the net and per-epoch mean loss."""
    if not samples:
        raise ValueError("cannot train a teacher on an empty dataset")
    k = samples[0].gt_heatmap.shape[0]
    net = make_teacher(samples[0].teacher_input.shape[0], k, config.seed)
    params = net.parameters()
    opt = AdamW(params, config.lr, weight_decay=config.weight_decay,
                total_steps=config.epochs * len(samples), cosine=config.cosine)
    history = []
    step = 0
    for epoch in range(config.epochs):
        total = 0.0
        for i in _order(len(samples), config.seed, epoch):
            s = samples[i]
            out = net.forward(s.teacher_input, training=True)
            loss = T.tmean(T.square(T.sub(out["heatmap"], s.gt_heatmap)))
            _check_finite(loss.item(), "teacher loss", step)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item()
            step += 1
        history.append(total / len(samples))
        log.info("teacher epoch %d loss %.6f", epoch, history[-1])
    opt.zero_grad()
    return net, history


def load_teacher(path) -> ToyNetwork:
    return ToyNetwork.from_state("teacher", checkpoint.load(path))


def inherit_head(student: ToyNetwork, teacher: ToyNetwork) -> ToyNetwork:
    if student.head_weight.shape != teacher.head_weight.shape or student.head_bias.shape != teacher.head_bias.shape:
        raise ValueError(f"head shapes differ: student {student.head_weight.shape}, teacher {teacher.head_weight.shape}")
    student.head_weight.data = teacher.head_weight.data.copy()
    student.head_bias.data = teacher.head_bias.data.copy()
    return student


# student ----------------------------------------------------------------------

@dataclass
class _SceneCache:
    teacher_feats: dict[str, np.ndarray]
    target: DistillTarget
    student_gt: np.ndarray
    weights: dict = field(default_factory=dict)


def _teacher_view(teacher: ToyNetwork, s: SceneSample) -> tuple[dict[str, np.ndarray], np.ndarray]:
    out = teacher.forward(s.teacher_input, training=False)
    feats = {n: out[n].data for n in DISTILL_LAYERS}
    return feats, np.clip(out["heatmap"].data, 0.0, 1.0)


def student_grid(sample: SceneSample, student: ToyNetwork) -> GridSpec:
    g = sample.grid
    return g.scaled(g.cells_y // student.downsample, g.cells_x // student.downsample)


def _cache(teacher: ToyNetwork, student: ToyNetwork, s: SceneSample) -> _SceneCache:
    feats, h_t = _teacher_view(teacher, s)
    target = DistillTarget(s.boxes, s.grid, h_t, s.gt_heatmap)
    gt_s = render_heatmap(s.boxes, student_grid(s, student), s.gt_heatmap.shape[0])
    return _SceneCache(feats, target, gt_s)


def _student_forward(student: ToyNetwork, frames: list[SceneSample], training: bool) -> dict[str, Tensor]:
    cur = frames[-1]
    if student.temporal and len(frames) > 1:
        prev = frames[-2]
        idx = warp_index(prev.ego_pose, cur.ego_pose, student_grid(cur, student))
        return student.forward(cur.student_input, training, prev_index=idx, prev_x=prev.student_input)
    return student.forward(cur.student_input, training)


def train_student(samples, teacher: ToyNetwork, config: TrainConfig, distill_config: DistillConfig | None = None,
                  eval_samples=None, student: StudentBundle | None = None):
    """Train a student against ground truth plus (optionally) the distillation loss.

    ``samples`` holds scenes, or 2-frame sequences when ``config.temporal``.
    Returns the trained bundle, one metrics row per epoch and one per-layer
    loss row per step and distilled layer.
    """
    if not samples:
        raise ValueError("cannot train a student on an empty dataset")
    frames = [s if isinstance(s, list) else [s] for s in samples]
    eval_frames = [s if isinstance(s, list) else [s] for s in (eval_samples or samples)]
    first = frames[0][-1]
    k = first.gt_heatmap.shape[0]
    if student is None:
        net = make_student(first.student_input.shape[0], k, config.seed, temporal=config.temporal)
        student = StudentBundle(net, default_pairs(teacher, net, config.seed))
    if distill_config is None:
        distill_config = DistillConfig()
    if not distill_config.layers:
        distill_config = replace(distill_config, layers=student.pairs)
    distill_config.validate()
    if config.inherit_head:
        inherit_head(student.net, teacher)

    teacher_params = teacher.parameters()
    for p in teacher_params:
        p.grad = None
    snapshot = [p.data.copy() for p in teacher_params]
    for p in teacher_params:
        p.requires_grad = False
    try:
        caches = [_cache(teacher, student.net, f[-1]) for f in frames]
        eval_caches = [_cache(teacher, student.net, f[-1]) for f in eval_frames]
        params = student.parameters()
        opt = AdamW(params, config.lr, weight_decay=config.weight_decay,
                    total_steps=config.epochs * len(frames), cosine=config.cosine)
        rows, layer_rows = [], []
        # a zero-weighted loss has zero gradient; skipping it also leaves the
        # adapters' BN buffers and weight decay untouched, as with distill off
        active = config.distill and config.distill_weight != 0 and any(
            (distill_config.alpha, distill_config.beta, distill_config.lam))
        step = 0
        for epoch in range(config.epochs):
            det_sum = dist_sum = 0.0
            for i in _order(len(frames), config.seed, epoch):
                c = caches[i]
                out = _student_forward(student.net, frames[i], training=True)
                det = T.tmean(T.square(T.sub(out["heatmap"], c.student_gt)))
                loss = det
                l_dist = 0.0
                if active:
                    dist, parts = total_distill_loss(c.teacher_feats, out, c.target, distill_config,
                                                     training=True, weight_cache=c.weights)
                    loss = T.add(det, T.mul(dist, config.distill_weight))
                    l_dist = dist.item()
                    for part in parts:
                        layer_rows.append((step, part.layer_id, part.l_feat.item(), part.l_attn.item()))
                _check_finite(loss.item(), "student loss", step)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                det_sum += det.item()
                dist_sum += l_dist
                step += 1
            ev = evaluate_student(student, teacher, eval_frames, eval_caches)
            rows.append((epoch, det_sum / len(frames), dist_sum / len(frames),
                         ev["feature_mse_to_teacher"], ev["synthetic_ap"]))
            log.info("student epoch %d det %.6f dist %.6f fmse %.6f ap %.4f", *rows[-1])
    finally:
        for p in teacher_params:
            p.requires_grad = True
    for p, before in zip(teacher_params, snapshot):
        assert p.grad is None and np.array_equal(p.data, before), "teacher parameters changed during student training"
    return student, rows, layer_rows


def evaluate_student(student: StudentBundle, teacher: ToyNetwork, frames, caches=None) -> dict[str, float]:
    frames = [f if isinstance(f, list) else [f] for f in frames]
    if caches is None:
        caches = [_cache(teacher, student.net, f[-1]) for f in frames]
    prehead = next((p for p in student.pairs if p.teacher_layer == "H"), None)
    heatmaps, grids, boxes, fmse, det = [], [], [], [], []
    for f, c in zip(frames, caches):
        out = _student_forward(student.net, f, training=False)
        heatmaps.append(out["heatmap"].data)
        grids.append(student_grid(f[-1], student.net))
        boxes.append(f[-1].boxes)
        det.append(float(np.mean((out["heatmap"].data - c.student_gt) ** 2)))
        if prehead is not None:
            adapted = adapt_student(out["H"], prehead.module, training=False).data
            fmse.append(float(np.mean((adapted - c.teacher_feats["H"]) ** 2)))
    cell = frames[0][-1].grid.cell_size
    return {
        "synthetic_ap": synthetic_ap(heatmaps, grids, boxes, student.net.num_classes, cell),
        "feature_mse_to_teacher": float(np.mean(fmse)) if fmse else float("nan"),
        "det_mse": float(np.mean(det)),
    }


def evaluate_teacher(teacher: ToyNetwork, samples: list[SceneSample]) -> dict[str, float]:
    heatmaps = [teacher.forward(s.teacher_input, training=False)["heatmap"].data for s in samples]
    return {
        "synthetic_ap": synthetic_ap(heatmaps, [s.grid for s in samples], [s.boxes for s in samples],
                                     teacher.num_classes, samples[0].grid.cell_size),
        "det_mse": float(np.mean([np.mean((h - s.gt_heatmap) ** 2) for h, s in zip(heatmaps, samples)])),
    }
