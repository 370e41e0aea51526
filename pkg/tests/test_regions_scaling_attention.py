import math

import numpy as np
import pytest

from distillbev import tensor as T
from distillbev.attention import (AdaptationModule, adapt_student, attention_maps, combine_attention,
                                  normalize_attention, pool_abs_mean, resolution_factor)
from distillbev.geometry import BevBox, GridSpec, rasterize_boxes
from distillbev.regions import Region, build_mask, compute_fp_cells, decompose
from distillbev.scaling import compute_scaling
from distillbev.tensor import Tensor

from oracles import entropy


def test_fp_cells_cases():
    assert compute_fp_cells(np.array([[0.5]]), np.array([[0.05]]), 0.1).all()
    h = np.random.default_rng(0).uniform(size=(3, 4, 4))
    assert not compute_fp_cells(h, h, 0.1).any()
    assert not compute_fp_cells(np.array([[0.1]]), np.array([[0.0]]), 0.1).any()
    assert not compute_fp_cells(np.array([[0.5]]), np.array([[0.1]]), 0.1).any()
    with pytest.raises(ValueError):
        compute_fp_cells(np.zeros((2, 2)), np.zeros((3, 3)), 0.1)


def test_fp_uses_class_max():
    h_t = np.zeros((2, 1, 2))
    h_t[1, 0, 0] = 0.6
    h_g = np.zeros((2, 1, 2))
    h_g[0, 0, 0] = 0.5
    assert compute_fp_cells(h_t, h_g, 0.1).tolist() == [[False, False]]


def test_decompose_cases():
    owner = np.array([[0, 0, -1, -1]])
    h_t = np.array([[0.9, 0.0, 0.7, 0.05]])
    fp = np.array([[True, False, True, False]])
    part = decompose(owner, fp, h_t, 0.1)
    assert part.label.tolist() == [[Region.TP, Region.FN, Region.FP, Region.TN]]
    assert part.count(Region.FP) == 1


def test_build_mask_cases():
    part = decompose(np.array([[0, -1, -1]]), np.array([[False, True, False]]), np.array([[0.9, 0.9, 0.0]]), 0.1)
    mask = build_mask(part, 20.0, include_fp=True)
    assert mask.m.tolist() == [[1.0, 20.0, 0.0]]
    assert mask.m_bar.tolist() == [[0.0, 0.0, 1.0]]
    off = build_mask(part, 20.0, include_fp=False)
    assert off.m.tolist() == [[1.0, 0.0, 0.0]] and off.m_bar.tolist() == [[0.0, 1.0, 1.0]]
    empty = decompose(np.full((3, 3), -1), np.zeros((3, 3), bool), np.zeros((3, 3)), 0.1)
    e = build_mask(empty, 20.0, True)
    assert (e.m == 0).all() and (e.m_bar == 1).all()
    with pytest.raises(ValueError):
        build_mask(part, -1.0, True)


def test_scaling_box_and_regions():
    grid = GridSpec(0, 10, 0, 10, 10, 10)
    box = BevBox(3.0, 6.5, 2.0, 3.0, 0.0, 0)  # 2 x 3 cells
    owner = rasterize_boxes([box], grid)
    fp = np.zeros((10, 10), bool)
    fp[0, :5] = True
    part = decompose(owner, fp, np.ones((10, 10)), 0.1)
    s = compute_scaling(part, [box], grid)
    assert (owner == 0).sum() == 6
    assert s[owner == 0] == pytest.approx(0.408248290463863, abs=1e-15)
    assert (s[part.label == Region.FP] == 0.2).all()
    tn = part.label == Region.TN
    assert s[tn].sum() == pytest.approx(1.0, abs=1e-12)
    assert s[tn][0] == 1.0 / (100 - 6 - 5)


def test_scaling_without_fp_cells():
    part = decompose(np.full((4, 4), -1), np.zeros((4, 4), bool), np.zeros((4, 4)), 0.1)
    s = compute_scaling(part, [], GridSpec(0, 4, 0, 4, 4, 4))
    assert np.all(s == 1 / 16)


def test_pool_abs_mean():
    assert pool_abs_mean(Tensor(np.array([3.0, -3.0]).reshape(2, 1, 1))).data[0, 0] == 3.0
    assert (pool_abs_mean(Tensor(np.zeros((3, 2, 2)))).data == 0).all()
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    assert np.array_equal(pool_abs_mean(Tensor(x)).data, np.abs(x[0]))


def test_normalize_attention_examples():
    assert np.allclose(normalize_attention(np.full((3, 3), 2.0), 0.5), 1.0, atol=1e-15)
    p = np.array([[math.log(4.0), 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(normalize_attention(p, 1.0), [[2.2857142857142856, 0.5714285714285714],
                                                           [0.5714285714285714, 0.5714285714285714]], rtol=1e-14)
    with pytest.raises(ValueError):
        normalize_attention(p, 0.0)


def test_attention_properties():
    rng = np.random.default_rng(1)
    p = rng.uniform(0, 2, size=(6, 5))
    for tau in (0.1, 0.5, 5.0):
        assert normalize_attention(p, tau).sum() == pytest.approx(30.0, abs=1e-9)
    assert np.max(np.abs(normalize_attention(p, 1e6) - 1)) <= 1e-3
    ents = [entropy(normalize_attention(p, tau)) for tau in (0.1, 0.5, 5.0)]
    assert ents[0] < ents[1] < ents[2]
    perm = rng.permutation(30)
    n = normalize_attention(p, 0.5).reshape(-1)
    assert np.allclose(normalize_attention(p.reshape(-1)[perm], 0.5), n[perm], atol=1e-12)


def test_combine_attention():
    n = np.random.default_rng(2).uniform(size=(3, 3))
    assert np.array_equal(combine_attention(n, n), n)
    assert (combine_attention(np.ones((2, 2)), np.ones((2, 2))) == 1).all()
    with pytest.raises(ValueError):
        combine_attention(np.ones((2, 2)), np.ones((3, 2)))


def test_attention_maps_bundle():
    rng = np.random.default_rng(3)
    f_t, f_s = Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=(4, 3, 3)))
    maps = attention_maps(f_t, f_s, 0.5)
    assert np.allclose(maps.a, (maps.n_teacher + maps.n_student) / 2)


def test_adapter_shapes():
    f_s = Tensor(np.random.default_rng(4).normal(size=(16, 32, 32)))
    mod = AdaptationModule.create("intermediate", 16, 64, upsample=2)
    assert len(mod.blocks) == 3
    assert adapt_student(f_s, mod).shape == (64, 64, 64)
    assert len(AdaptationModule.create("prehead", 16, 8).blocks) == 2
    with pytest.raises(ValueError):
        AdaptationModule.create("middle", 4, 4)


def test_resolution_factor():
    assert resolution_factor((8, 8), (16, 16)) == 2
    assert resolution_factor((8, 8), (8, 8)) == 1
    with pytest.raises(ValueError):
        resolution_factor((6, 6), (16, 16))
    with pytest.raises(ValueError):
        resolution_factor((8, 8), (16, 8))


def test_prehead_identity_configuration_passes_through():
    c_s, c_t = 5, 3
    mod = AdaptationModule.create("prehead", c_s, c_t)
    for i, b in enumerate(mod.blocks):
        c_in = c_s if i == 0 else c_t
        b.weight.data = np.eye(c_t, c_in).reshape(c_t, c_in, 1, 1)
        b.bias.data = np.zeros(c_t)
        b.running_var[:] = 1.0 - T.BN_EPS
    x = np.abs(np.random.default_rng(5).normal(size=(c_s, 4, 4)))
    out = adapt_student(Tensor(x), mod, training=False)
    np.testing.assert_allclose(out.data, x[:c_t], rtol=0, atol=1e-12)
