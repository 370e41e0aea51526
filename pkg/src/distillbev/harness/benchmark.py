"""Desk-scale comparison: no distillation, plain imitation, and the full weighted method."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..losses import DistillConfig
from ..scene import SceneConfig
from ..scene_io import generate_dataset
from .train import TrainConfig, evaluate_teacher, train_student, train_teacher

log = logging.getLogger(__name__)

VARIANTS = ("off", "plain", "full")


@dataclass
class BenchmarkConfig:
    n_train: int = 256
    n_eval: int = 64
    epochs: int = 30
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)


@dataclass
class BenchmarkResult:
    final: dict[str, list[dict[str, float]]]
    teacher: dict[str, float]
    seconds: float

    def mean(self, variant: str, metric: str) -> float:
        return float(np.mean([r[metric] for r in self.final[variant]]))


def variant_config(base: DistillConfig, variant: str) -> DistillConfig:
    if variant == "plain":
        return replace(base, use_mask=False, use_scaling=False, use_attention=False, use_fp=False)
    return replace(base)


def run_benchmark(config: BenchmarkConfig) -> BenchmarkResult:
    """One teacher on a fixed dataset; each variant trained once per student seed."""
    start = time.perf_counter()
    train = generate_dataset(config.scene, config.data_seed, config.n_train)
    evals = generate_dataset(config.scene, config.data_seed + 1_000_003, config.n_eval)
    tcfg = replace(config.train, epochs=config.epochs, seed=config.data_seed)
    teacher, _ = train_teacher(train, tcfg)
    teacher_metrics = evaluate_teacher(teacher, evals)
    final: dict[str, list[dict[str, float]]] = {v: [] for v in VARIANTS}
    for seed in config.seeds:
        for variant in VARIANTS:
            cfg = replace(config.train, epochs=config.epochs, seed=seed, distill=variant != "off")
            _, rows, _ = train_student(train, teacher, cfg, variant_config(config.distill, variant), evals)
            last = rows[-1]
            final[variant].append({"feature_mse_to_teacher": last[3], "synthetic_ap": last[4], "det_loss": last[1]})
            log.info("seed %d %s: fmse %.5f ap %.4f", seed, variant, last[3], last[4])
    return BenchmarkResult(final, teacher_metrics, time.perf_counter() - start)
