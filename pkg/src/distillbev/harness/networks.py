"""Toy BEV encoders: a full-resolution teacher and a half-resolution student.

Both expose the named layer outputs ``B0`` (stem), ``B1``, ``B2`` and ``H``
(pre-head) plus a 1x1 detection head producing a K-channel heatmap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

LAYER_NAMES = ("B0", "B1", "B2", "H")


@dataclass
class ConvBNReLU:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator) -> "ConvBNReLU":
        w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), size=(c_out, c_in, k, k))
        return cls(Tensor(w, requires_grad=True), Tensor(np.ones(c_out), requires_grad=True),
                   Tensor(np.zeros(c_out), requires_grad=True), np.zeros(c_out), np.ones(c_out))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        k = self.weight.shape[-1]
        y = T.conv2d(x, self.weight, None, padding=(k - 1) // 2)
        return T.relu(T.batchnorm(y, self.gamma, self.beta, self.running_mean, self.running_var, training))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.gamma, self.beta]

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight.data, f"{prefix}.gamma": self.gamma.data,
                f"{prefix}.beta": self.beta.data, f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for name in ("weight", "gamma", "beta"):
            src = arrays[f"{prefix}.{name}"]
            if src.shape != getattr(self, name).shape:
                raise ValueError(f"{prefix}.{name}: shape {src.shape} != {getattr(self, name).shape}")
            getattr(self, name).data = np.array(src)
        self.running_mean[:] = arrays[f"{prefix}.running_mean"]
        self.running_var[:] = arrays[f"{prefix}.running_var"]


class ToyNetwork:
    """Four 3x3 conv-BN-ReLU stages and a 1x1 heatmap head.

    ``downsample`` average-pools the input first (2 for the student).
    With ``temporal`` set, the B2 output is concatenated with the previous
    frame's ego-motion-warped B2 and fused back by a 1x1 conv.
    """

    def __init__(self, name: str, in_channels: int, widths: tuple[int, int, int, int], num_classes: int,
                 downsample: int = 1, temporal: bool = False, seed: int = 0):
        self.name = name
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.num_classes = num_classes
        self.downsample = downsample
        self.temporal = temporal
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 77])))
        chans = (in_channels,) + self.widths
        self.stages = [ConvBNReLU.init(chans[i], chans[i + 1], 3, rng) for i in range(4)]
        c_h = self.widths[-1]
        self.head_weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_h), size=(num_classes, c_h, 1, 1)),
                                  requires_grad=True)
        self.head_bias = Tensor(np.zeros(num_classes), requires_grad=True)
        self.fuse: ConvBNReLU | None = None
        if temporal:
            c2 = self.widths[2]
            self.fuse = ConvBNReLU.init(2 * c2, c2, 1, rng)

    def forward(self, x: np.ndarray | Tensor, training: bool, prev_index: np.ndarray | None = None,
                prev_x: np.ndarray | None = None) -> dict[str, Tensor]:
        """Layer outputs B0, B1, B2, H and the raw heatmap under ``"heatmap"``.

        In temporal mode ``prev_x`` is the previous frame's input and
        ``prev_index`` the flat source index (see ``geometry.warp_index``) at
        this network's feature resolution.
        """
        out = self._encode(T.as_tensor(x), training, upto="B2" if self.temporal else "H")
        if self.temporal:
            if prev_x is None:
                prev_b2 = T.as_tensor(np.zeros_like(out["B2"].data))
            else:
                prev_b2 = T.gather_cells(self._encode(T.as_tensor(prev_x), training, upto="B2")["B2"], prev_index)
            fused = self.fuse(T.concat([out["B2"], prev_b2], axis=0), training)
            out["B2"] = fused
            out["H"] = self.stages[3](fused, training)
        out["heatmap"] = T.conv2d(out["H"], self.head_weight, self.head_bias)
        return out

    def _encode(self, x: Tensor, training: bool, upto: str = "H") -> dict[str, Tensor]:
        if self.downsample > 1:
            x = T.avg_pool(x, self.downsample)
        out = {}
        for name, stage in zip(LAYER_NAMES, self.stages):
            x = stage(x, training)
            out[name] = x
            if name == upto:
                break
        return out

    def parameters(self) -> list[Tensor]:
        ps = [p for s in self.stages for p in s.parameters()]
        if self.fuse is not None:
            ps += self.fuse.parameters()
        return ps + [self.head_weight, self.head_bias]

    def head_parameters(self) -> list[Tensor]:
        return [self.head_weight, self.head_bias]

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            f"{self.name}.meta": np.array([self.in_channels, *self.widths, self.num_classes,
                                           self.downsample, int(self.temporal)], dtype=np.float64)}
        for n, s in zip(LAYER_NAMES, self.stages):
            out.update(s.state(f"{self.name}.{n}"))
        if self.fuse is not None:
            out.update(self.fuse.state(f"{self.name}.fuse"))
        out[f"{self.name}.head.weight"] = self.head_weight.data
        out[f"{self.name}.head.bias"] = self.head_bias.data
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n, s in zip(LAYER_NAMES, self.stages):
            s.load_state(f"{self.name}.{n}", arrays)
        if self.fuse is not None:
            self.fuse.load_state(f"{self.name}.fuse", arrays)
        self.head_weight.data = np.array(arrays[f"{self.name}.head.weight"])
        self.head_bias.data = np.array(arrays[f"{self.name}.head.bias"])

    @classmethod
    def from_state(cls, name: str, arrays: dict[str, np.ndarray]) -> "ToyNetwork":
        meta = arrays.get(f"{name}.meta")
        if meta is None:
            raise ValueError(f"checkpoint has no {name!r} network")
        m = [int(v) for v in meta]
        net = cls(name, m[0], tuple(m[1:5]), m[5], downsample=m[6], temporal=bool(m[7]))
        net.load_state(arrays)
        return net


def make_teacher(in_channels: int, num_classes: int, seed: int) -> ToyNetwork:
    return ToyNetwork("teacher", in_channels, (8, 16, 16, 16), num_classes, downsample=1, seed=seed)


def make_student(in_channels: int, num_classes: int, seed: int, temporal: bool = False) -> ToyNetwork:
    return ToyNetwork("student", in_channels, (8, 12, 12, 16), num_classes, downsample=2,
                      temporal=temporal, seed=seed + 1)
