"""Spatial attention maps and the student-side adaptation modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


def pool_abs_mean(f: Tensor) -> Tensor:
    """Channel mean of |F|, giving an H x W map."""
    if f.data.ndim != 3 or f.shape[0] < 1:
        raise ValueError(f"expected a C x H x W feature map, got {f.shape}")
    return T.tmean(T.tabs(f), axis=0)


def normalize_attention(p, tau: float) -> np.ndarray:
    """H*W times the softmax of p/tau over all cells."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    n = p.size
    return (n * T.softmax_scaled(Tensor(p.reshape(-1)), tau).data).reshape(p.shape)


def combine_attention(n_t: np.ndarray, n_s: np.ndarray) -> np.ndarray:
    if np.shape(n_t) != np.shape(n_s):
        raise ValueError(f"attention shapes differ: {np.shape(n_t)} vs {np.shape(n_s)}")
    return (np.asarray(n_t) + np.asarray(n_s)) / 2


@dataclass
class AttentionMaps:
    p_teacher: np.ndarray
    p_student: np.ndarray
    n_teacher: np.ndarray
    n_student: np.ndarray
    a: np.ndarray


def attention_maps(f_t: Tensor, f_s_adapted: Tensor, tau: float) -> AttentionMaps:
    p_t = pool_abs_mean(f_t).data
    p_s = pool_abs_mean(f_s_adapted).data
    n_t = normalize_attention(p_t, tau)
    n_s = normalize_attention(p_s, tau)
    return AttentionMaps(p_t, p_s, n_t, n_s, combine_attention(n_t, n_s))


# adaptation modules ------------------------------------------------------------

@dataclass
class Block:
    """1x1 conv, batchnorm, relu."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator) -> "Block":
        w = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_out, c_in, 1, 1))
        return cls(
            weight=Tensor(w, requires_grad=True),
            bias=Tensor(np.zeros(c_out), requires_grad=True),
            gamma=Tensor(np.ones(c_out), requires_grad=True),
            beta=Tensor(np.zeros(c_out), requires_grad=True),
            running_mean=np.zeros(c_out),
            running_var=np.ones(c_out),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias)
        y = T.batchnorm(y, self.gamma, self.beta, self.running_mean, self.running_var, training)
        return T.relu(y)


@dataclass
class AdaptationModule:
    """Maps a student feature map to the shape of its paired teacher layer.

    ``prehead`` modules default to two blocks, ``intermediate`` modules to an
    upsample followed by three. Both may upsample when the student layer is
    coarser than the teacher layer.
    """

    kind: str
    upsample: int
    blocks: list[Block] = field(default_factory=list)

    @classmethod
    def create(cls, kind: str, c_in: int, c_out: int, upsample: int = 1,
               num_blocks: int | None = None, rng: np.random.Generator | None = None) -> "AdaptationModule":
        if kind not in ("prehead", "intermediate"):
            raise ValueError(f"unknown adaptation module kind {kind!r}")
        if num_blocks is None:
            num_blocks = 2 if kind == "prehead" else 3
        rng = rng if rng is not None else np.random.default_rng(0)
        blocks = [Block.init(c_in if i == 0 else c_out, c_out, rng) for i in range(num_blocks)]
        return cls(kind=kind, upsample=upsample, blocks=blocks)

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [t for b in self.blocks for t in (b.weight, b.bias, b.gamma, b.beta)]

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            for name in ("weight", "bias", "gamma", "beta"):
                out[f"{prefix}.block{i}.{name}"] = getattr(b, name).data
            out[f"{prefix}.block{i}.running_mean"] = b.running_mean
            out[f"{prefix}.block{i}.running_var"] = b.running_var
        return out

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for i, b in enumerate(self.blocks):
            for name in ("weight", "bias", "gamma", "beta"):
                getattr(b, name).data = np.array(arrays[f"{prefix}.block{i}.{name}"])
            b.running_mean[:] = arrays[f"{prefix}.block{i}.running_mean"]
            b.running_var[:] = arrays[f"{prefix}.block{i}.running_var"]


def resolution_factor(student_hw: tuple[int, int], teacher_hw: tuple[int, int]) -> int:
    """Integer upsampling factor from student to teacher resolution."""
    sh, sw = student_hw
    th, tw = teacher_hw
    if th % sh or tw % sw or th // sh != tw // sw:
        raise ValueError(f"teacher resolution {teacher_hw} is not an integer multiple of student {student_hw}")
    return th // sh


def adapt_student(f_s: Tensor, module: AdaptationModule, training: bool = True) -> Tensor:
    x = T.upsample_nearest(f_s, module.upsample)
    for block in module.blocks:
        x = block(x, training)
    return x
