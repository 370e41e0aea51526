"""Strict INI experiment configuration.

Sections and keys (defaults in brackets)::

    [experiment] seed [0], output_dir [runs], n_scenes [256], n_eval [64]
    [grid]       x_min [-16] x_max [16] y_min [-16] y_max [16] cells_x [32] cells_y [32]
    [scene]      every scalar field of SceneConfig
    [train]      epochs [30] lr [2e-4] weight_decay [0.01] cosine [true] distill [true]
                 inherit_head [true] distill_weight [1.0] temporal [false]
    [distill]    alpha [6e-3] beta [4e-2] lambda [2.5e-3] eta [20] tau [0.5] gamma [0.1]
                 use_mask use_scaling use_attention use_fp [true]

Unknown sections or keys are errors: a misspelt hyper-parameter would
otherwise silently fall back to its default.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .geometry import GridSpec
from .harness.train import TrainConfig
from .losses import DistillConfig
from .scene import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0
    output_dir: str = "runs"
    n_scenes: int = 256
    n_eval: int = 64


_DISTILL_KEYS = {"alpha": "alpha", "beta": "beta", "lambda": "lam", "eta": "eta", "tau": "tau", "gamma": "gamma",
                 "use_mask": "use_mask", "use_scaling": "use_scaling", "use_attention": "use_attention",
                 "use_fp": "use_fp"}
_SCENE_SKIP = {"grid", "classes"}


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _apply(obj, section: configparser.SectionProxy, keymap: dict[str, str], name: str):
    updates = {}
    for key, raw in section.items():
        if key not in keymap:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        attr = keymap[key]
        updates[attr] = _convert(raw, getattr(obj, attr), f"[{name}] {key}")
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"experiment", "grid", "scene", "train", "distill"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    cfg = ExperimentConfig()
    scene = cfg.scene
    if cp.has_section("grid"):
        g = _apply(scene.grid, cp["grid"], {f.name: f.name for f in fields(GridSpec)}, "grid")
        scene = replace(scene, grid=g)
    if cp.has_section("scene"):
        keys = {f.name: f.name for f in fields(SceneConfig) if f.name not in _SCENE_SKIP}
        scene = _apply(scene, cp["scene"], keys, "scene")
    train = cfg.train
    if cp.has_section("train"):
        keys = {f.name: f.name for f in fields(TrainConfig) if f.name != "seed"}
        train = _apply(train, cp["train"], keys, "train")
    distill = cfg.distill
    if cp.has_section("distill"):
        distill = _apply(distill, cp["distill"], _DISTILL_KEYS, "distill")
    exp = replace(cfg, scene=scene, train=train, distill=distill)
    if cp.has_section("experiment"):
        keys = {"seed": "seed", "output_dir": "output_dir", "n_scenes": "n_scenes", "n_eval": "n_eval"}
        exp = _apply(exp, cp["experiment"], keys, "experiment")
    exp.train = replace(exp.train, seed=exp.seed)
    return exp


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def default_config_text() -> str:
    """A fully populated config with every default spelled out."""
    c = ExperimentConfig()
    g = c.scene.grid
    lines = ["[experiment]", f"seed = {c.seed}", f"output_dir = {c.output_dir}", f"n_scenes = {c.n_scenes}",
             f"n_eval = {c.n_eval}", "", "[grid]"]
    lines += [f"{f.name} = {getattr(g, f.name)}" for f in fields(GridSpec)]
    lines += ["", "[scene]"]
    lines += [f"{f.name} = {getattr(c.scene, f.name)}" for f in fields(SceneConfig) if f.name not in _SCENE_SKIP]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {getattr(c.train, f.name)}" for f in fields(TrainConfig) if f.name != "seed"]
    lines += ["", "[distill]"]
    lines += [f"{k} = {getattr(c.distill, a)}" for k, a in _DISTILL_KEYS.items()]
    return "\n".join(lines) + "\n"
