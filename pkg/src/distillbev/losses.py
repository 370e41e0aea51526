"""Weighted feature imitation, attention imitation and the multi-scale total."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AdaptationModule, adapt_student, attention_maps, pool_abs_mean, resolution_factor
from .geometry import BevBox, GridSpec, rasterize_boxes
from .regions import RegionMask, RegionPartition, build_mask, compute_fp_cells, decompose
from .scaling import compute_scaling
from .tensor import Tensor

EARLY_LAYERS = frozenset({"B0"})


class DistillConfigError(ValueError):
    pass


@dataclass
class LayerPair:
    teacher_layer: str
    student_layer: str
    module: AdaptationModule
    include_fp: bool = False


@dataclass
class DistillConfig:
    alpha: float = 6e-3
    beta: float = 4e-2
    lam: float = 2.5e-3
    eta: float = 20.0
    tau: float = 0.5
    gamma: float = 0.1
    layers: list[LayerPair] = field(default_factory=list)
    # ablation switches; all off gives plain feature imitation
    use_mask: bool = True
    use_scaling: bool = True
    use_attention: bool = True
    use_fp: bool = True

    def validate(self) -> None:
        fp_layers = [p for p in self.layers if p.include_fp]
        if len(fp_layers) > 1 or any(p.module.kind != "prehead" for p in fp_layers):
            raise DistillConfigError("FP regions may only be enabled on the single pre-head pair")
        for p in self.layers:
            if p.teacher_layer in EARLY_LAYERS or p.student_layer in EARLY_LAYERS:
                raise DistillConfigError(f"distilling early layer {p.teacher_layer}/{p.student_layer} is not allowed")

    @classmethod
    def plain(cls, layers: list[LayerPair], **kw) -> "DistillConfig":
        return cls(layers=layers, use_mask=False, use_scaling=False, use_attention=False, use_fp=False, **kw)


@dataclass
class WeightMaps:
    m: np.ndarray
    m_bar: np.ndarray
    s: np.ndarray
    a: np.ndarray


@dataclass
class LayerPairOutput:
    layer_id: str
    l_feat: Tensor
    l_attn: Tensor
    weight_maps: WeightMaps
    partition: RegionPartition | None = None


@dataclass
class DistillTarget:
    """What the loss needs to know about one scene."""

    boxes: list[BevBox]
    grid: GridSpec
    h_teacher: np.ndarray
    h_gt: np.ndarray


def feature_imitation_loss(f_t, f_s_adapted: Tensor, m, m_bar, s, a, alpha: float, beta: float) -> Tensor:
    f_t = T.as_tensor(f_t)
    if f_t.shape != f_s_adapted.shape:
        raise ValueError(f"teacher {f_t.shape} and adapted student {f_s_adapted.shape} differ")
    hw = f_t.shape[1:]
    for name, g in (("m", m), ("m_bar", m_bar), ("s", s), ("a", a)):
        if np.shape(g) != hw:
            raise ValueError(f"weight map {name} has shape {np.shape(g)}, expected {hw}")
    w = (alpha * np.asarray(m) + beta * np.asarray(m_bar)) * np.asarray(s) * np.asarray(a)
    diff = T.sub(f_t, f_s_adapted)
    return T.tsum(T.mul(T.square(diff), w[None]))


def attention_imitation_loss(p_t, p_s) -> Tensor:
    """L1 distance between two pooled attention maps."""
    p_t, p_s = T.as_tensor(p_t), T.as_tensor(p_s)
    if p_t.shape != p_s.shape:
        raise ValueError(f"attention map shapes differ: {p_t.shape} vs {p_s.shape}")
    return T.tsum(T.tabs(T.sub(p_t, p_s)))


def _resample(heatmap: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    k, h, w = heatmap.shape
    if (h, w) == hw:
        return heatmap
    th, tw = hw
    if h % th == 0 and w % tw == 0 and h // th == w // tw:
        f = h // th
        return heatmap.reshape(k, th, f, tw, f).max(axis=(2, 4))
    if th % h == 0 and tw % w == 0 and th // h == tw // w:
        f = th // h
        return heatmap.repeat(f, axis=1).repeat(f, axis=2)
    raise DistillConfigError(f"heatmap resolution {(h, w)} does not align with layer resolution {hw}")


def region_weights(target: DistillTarget, hw: tuple[int, int], eta: float, gamma: float,
                   include_fp: bool) -> tuple[RegionPartition, RegionMask, np.ndarray]:
    """Partition, mask and scaling with the boxes re-rasterized at ``hw``."""
    grid = target.grid.scaled(*hw)
    h_t = _resample(np.asarray(target.h_teacher), hw)
    h_g = _resample(np.asarray(target.h_gt), hw)
    owner = rasterize_boxes(target.boxes, grid)
    fp = compute_fp_cells(h_t, h_g, gamma)
    partition = decompose(owner, fp, h_t, gamma)
    mask = build_mask(partition, eta, include_fp)
    return partition, mask, compute_scaling(partition, target.boxes, grid)


def total_distill_loss(teacher_feats: dict[str, np.ndarray], student_feats: dict[str, Tensor],
                       target: DistillTarget, config: DistillConfig, training: bool = True,
                       frozen_attention: dict[str, np.ndarray] | None = None,
                       weight_cache: dict | None = None) -> tuple[Tensor, list[LayerPairOutput]]:
    """Sum over configured layer pairs of ``L_feat + lam * L_attn``.

    Masks, scaling and attention are constants for differentiation; the
    gradient reaches the student through the adapted features only.
    ``frozen_attention`` replaces the computed attention per teacher layer
    (used to evaluate the loss with fixed weights). ``weight_cache`` memoizes
    the scene-dependent masks and scaling across calls.
    """
    config.validate()
    total = T.as_tensor(0.0)
    outputs: list[LayerPairOutput] = []
    for pair in config.layers:
        f_t = T.as_tensor(teacher_feats[pair.teacher_layer])
        f_s = student_feats[pair.student_layer]
        hw = f_t.shape[1:]
        factor = resolution_factor(f_s.shape[1:], hw)
        if factor != pair.module.upsample:
            raise DistillConfigError(
                f"layer {pair.teacher_layer}: adapter upsamples by {pair.module.upsample}, "
                f"resolution ratio is {factor}")
        f_sa = adapt_student(f_s, pair.module, training)
        if f_sa.shape != f_t.shape:
            raise DistillConfigError(f"adapted student {f_sa.shape} does not match teacher {f_t.shape}")

        include_fp = pair.include_fp and config.use_fp
        partition = None
        if config.use_mask or config.use_scaling:
            key = (pair.teacher_layer, hw, include_fp)
            if weight_cache is not None and key in weight_cache:
                partition, mask, s = weight_cache[key]
            else:
                partition, mask, s = region_weights(target, hw, config.eta, config.gamma, include_fp)
                if weight_cache is not None:
                    weight_cache[key] = (partition, mask, s)
        ones = np.ones(hw)
        m, m_bar = (mask.m, mask.m_bar) if config.use_mask else (ones, ones)
        s = s if config.use_scaling else ones
        if not config.use_attention:
            a = ones
        elif frozen_attention is not None and pair.teacher_layer in frozen_attention:
            a = frozen_attention[pair.teacher_layer]
        else:
            a = attention_maps(f_t, f_sa, config.tau).a

        l_feat = feature_imitation_loss(f_t, f_sa, m, m_bar, s, a, config.alpha, config.beta)
        if config.use_attention:
            l_attn = attention_imitation_loss(pool_abs_mean(f_t), pool_abs_mean(f_sa))
        else:
            l_attn = T.as_tensor(0.0)
        total = T.add(total, T.add(l_feat, T.mul(l_attn, config.lam)))
        outputs.append(LayerPairOutput(pair.teacher_layer, l_feat, l_attn, WeightMaps(m, m_bar, s, a), partition))
    return total, outputs
