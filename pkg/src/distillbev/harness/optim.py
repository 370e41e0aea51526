"""AdamW with an optional cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from ..tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, total_steps: int | None = None, cosine: bool = True):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.cosine = cosine and total_steps is not None
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if not self.cosine:
            return self.lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            # decay conv/linear weights only
            if self.weight_decay and p.data.ndim > 1:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
