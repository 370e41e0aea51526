import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillbev.geometry import (BevBox, EgoPose, GridSpec, gaussian_sigma, rasterize_boxes, render_heatmap,
                                 warp_bev, wrap_angle)

from oracles import owner_oracle, warp_oracle

GRID = GridSpec(0, 10, 0, 10, 10, 10)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 0, 0, 10, 10, 10)
    with pytest.raises(ValueError):
        GridSpec(0, 10, 0, 10, 0, 10)


def test_box_validation_and_yaw_wrap():
    with pytest.raises(ValueError):
        BevBox(0, 0, -1, 1, 0, 0)
    with pytest.raises(ValueError):
        BevBox(0, 0, 1, 1, 3 * math.pi, 0)
    assert BevBox(0, 0, 1, 1, math.pi, 0).yaw == math.pi
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_empty_box_list():
    assert (rasterize_boxes([], GRID) == -1).all()


def test_axis_aligned_box_cells():
    # cells x 2..4 and y 5..6 have centers 2.5..4.5, 5.5..6.5
    box = BevBox(3.5, 6.0, 3.0, 2.0, 0.0, 0)
    owner = rasterize_boxes([box], GRID)
    rows, cols = np.nonzero(owner == 0)
    assert sorted(zip(rows.tolist(), cols.tolist())) == [(r, c) for r in (5, 6) for c in (2, 3, 4)]


def test_rotated_box_matches_polygon_oracle():
    grid = GridSpec(-8, 8, -8, 8, 32, 32)
    box = BevBox(0.3, -0.7, 6.0, 2.5, math.pi / 4, 0)
    owner = rasterize_boxes([box], grid)
    assert np.array_equal(owner, owner_oracle([box], grid))
    assert (owner == 0).sum() > 20


def test_smaller_box_wins_overlap():
    big = BevBox(5.2, 5.2, 5, 5, 0, 0)  # 25 m2 over cells 3..7
    small = BevBox(5.2, 5.2, 2, 2, 0, 1)  # 4 m2 over cells 4..5
    for boxes, small_idx in (([big, small], 1), ([small, big], 0)):
        owner = rasterize_boxes(boxes, GRID)
        assert (owner[4:6, 4:6] == small_idx).all()
        assert (owner == 1 - small_idx).sum() == 25 - 4


def test_tiny_box_gets_center_cell():
    owner = rasterize_boxes([BevBox(3.1, 7.2, 0.2, 0.2, 0.3, 0)], GRID)
    assert np.argwhere(owner == 0).tolist() == [[7, 3]]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-6, 6), st.floats(-6, 6), st.floats(0.3, 8), st.floats(0.3, 4),
                          st.floats(-3.1, 3.1)), max_size=5))
def test_rasterize_property_vs_oracle(specs):
    grid = GridSpec(-8, 8, -8, 8, 16, 16)
    boxes = [BevBox(*s, class_id=0) for s in specs]
    assert np.array_equal(rasterize_boxes(boxes, grid), owner_oracle(boxes, grid))


def test_heatmap_peak_and_sigma_falloff():
    grid = GridSpec(0, 20, 0, 20, 20, 20)
    box = BevBox(10.5, 10.5, 10.0, 5.0, 0.4, 1)
    heat = render_heatmap([box], grid, 2)
    assert heat[1, 10, 10] == 1.0 and heat[0].max() == 0.0
    sigma = gaussian_sigma(box, grid)
    assert sigma == 1.0
    # the neighbouring cell center lies exactly sigma away
    assert heat[1, 10, 11] == pytest.approx(0.6065306597126334, abs=1e-15)
    assert np.array_equal(render_heatmap([box, box], grid, 2), heat)
    with pytest.raises(ValueError):
        render_heatmap([box], grid, 1)


def test_sigma_floor_is_cell_size():
    assert gaussian_sigma(BevBox(0, 0, 0.8, 0.8, 0, 0), GridSpec(0, 8, 0, 8, 4, 4)) == 2.0


def test_warp_identity():
    f = np.random.default_rng(0).normal(size=(2, 10, 10))
    pose = EgoPose(3.0, -1.0, 0.7)
    assert np.array_equal(warp_bev(f, pose, pose, GRID), f)


def test_warp_one_cell_translation():
    f = np.random.default_rng(1).normal(size=(1, 10, 10))
    out = warp_bev(f, EgoPose(), EgoPose(1.0, 0.0, 0.0), GRID)
    assert np.array_equal(out[:, :, :-1], f[:, :, 1:])
    assert (out[:, :, -1] == 0).all()


def test_warp_rotation_matches_oracle():
    grid = GridSpec(-5, 5, -5, 5, 10, 10)
    f = np.random.default_rng(2).normal(size=(3, 10, 10))
    to = EgoPose(0.0, 0.0, math.pi / 2)
    out = warp_bev(f, EgoPose(), to, grid)
    assert np.array_equal(out, warp_oracle(f, EgoPose(), to, grid))
    # a quarter turn of a square grid about its center is a pure transpose-and-flip
    assert np.array_equal(out[0], np.rot90(f[0], k=1))


@settings(max_examples=40, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-3.1, 3.1), st.floats(-4, 4), st.floats(-3.1, 3.1))
def test_warp_property_vs_oracle(tx, ty, h1, tx2, h2):
    grid = GridSpec(-6, 6, -6, 6, 12, 12)
    f = np.arange(144.0).reshape(1, 12, 12)
    a, b = EgoPose(tx, ty, h1), EgoPose(tx2, 0.0, h2)
    assert np.array_equal(warp_bev(f, a, b, grid), warp_oracle(f, a, b, grid))
