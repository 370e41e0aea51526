"""Small shared builders for the loss tests and the acceptance suite."""
import numpy as np

from distillbev.attention import AdaptationModule
from distillbev.geometry import BevBox, GridSpec, render_heatmap
from distillbev.losses import DistillConfig, DistillTarget, LayerPair
from distillbev.tensor import Tensor


def two_layer_instance(seed=0):
    """Teacher features 2x4x4 (pre-head) and 4x8x8 (intermediate), students at half resolution."""
    rng = np.random.default_rng(seed)
    grid = GridSpec(-4, 4, -4, 4, 8, 8)
    boxes = [BevBox(-1.7, 1.2, 2.6, 1.4, 0.5, 0), BevBox(2.2, -2.1, 1.2, 1.0, -0.3, 1)]
    h_gt = render_heatmap(boxes, grid, 2)
    h_t = h_gt.copy()
    h_t[1, 0, 0] = 0.7  # an FP blob far from both boxes
    target = DistillTarget(boxes, grid, h_t, h_gt)
    teacher = {"H": np.abs(rng.normal(size=(2, 4, 4))), "B2": np.abs(rng.normal(size=(4, 8, 8)))}
    student = {"H": Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True),
               "B2": Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)}
    pairs = [LayerPair("H", "H", AdaptationModule.create("prehead", 3, 2, 2, num_blocks=1, rng=rng), True),
             LayerPair("B2", "B2", AdaptationModule.create("intermediate", 3, 4, 2, num_blocks=1, rng=rng))]
    for p in pairs:
        for b in p.module.blocks:
            b.bias.data = rng.normal(size=b.bias.shape) * 0.1
            b.gamma.data = rng.uniform(0.5, 1.5, size=b.gamma.shape)
            b.beta.data = rng.normal(size=b.beta.shape) * 0.5 + 0.5
            b.running_mean[:] = rng.normal(size=b.running_mean.shape) * 0.1
            b.running_var[:] = rng.uniform(0.5, 2.0, size=b.running_var.shape)
    return teacher, student, target, DistillConfig(layers=pairs)


def adapter_params(config):
    return [t for p in config.layers for t in p.module.parameters()]
