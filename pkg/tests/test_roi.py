import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boxcorr import tensor as T
from boxcorr.geometry import BoxXYXY, ViewTransform, is_valid_array
from boxcorr.roi import RoiMode, avg_overlap, extract, roi_align, shared_grid_boxes

MAP22 = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])


def bilinear(fmap, x, y):
    h, w = fmap.shape[:2]
    x, y = min(max(x, 0), w - 1), min(max(y, 0), h - 1)
    x0, y0 = math.floor(x), math.floor(y)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bottom = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def overlap_mean(fmap, box):
    """Mean of cells whose square intersects the box with positive area."""
    h, w = fmap.shape[:2]
    x1, y1, x2, y2 = box[0] * w, box[1] * h, box[2] * w, box[3] * h
    cells = [fmap[r, c] for r in range(h) for c in range(w) if min(c + 1, x2) > max(c, x1) and min(r + 1, y2) > max(r, y1)]
    return np.mean(cells, axis=0)


@st.composite
def unit_boxes(draw):
    x1, x2 = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    y1, y2 = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    if x2 - x1 < 1e-3 or y2 - y1 < 1e-3:
        x1, y1, x2, y2 = 0.1, 0.2, 0.6, 0.9
    return np.array([x1, y1, x2, y2])


# ---------------------------------------------------------------- roi_align


def test_ra1_whole_view_center_sample():
    assert roi_align(MAP22, [0, 0, 1, 1], 1).data.item() == pytest.approx(2.5)


@given(unit_boxes(), st.sampled_from([1, 2, 3, 7]), st.floats(-5, 5))
def test_constant_map_gives_constant_bins(box, c, v):
    fmap = T.Tensor(np.full((8, 8, 3), v))
    np.testing.assert_allclose(roi_align(fmap, box, c).data, v, atol=1e-12)


@given(unit_boxes(), st.sampled_from([1, 3, 7]), st.integers(0, 2**31 - 1))
def test_roi_align_matches_bilinear_oracle(box, c, seed):
    fmap = np.random.default_rng(seed).normal(size=(8, 8, 4))
    got = roi_align(T.Tensor(fmap), box, c).data
    x1, y1, x2, y2 = box
    for r in range(c):
        for q in range(c):
            u = x1 + (q + 0.5) / c * (x2 - x1)
            v = y1 + (r + 0.5) / c * (y2 - y1)
            np.testing.assert_allclose(got[r, q], bilinear(fmap, u * 8 - 0.5, v * 8 - 0.5), atol=1e-5)


def test_ra1_equals_rac1(rng):
    fmaps = T.Tensor(rng.normal(size=(2, 8, 8, 5)))
    boxes = np.array([[0.1, 0.1, 0.5, 0.9], [0.3, 0.2, 0.8, 0.4]])
    a = extract(fmaps, [0, 1], boxes, RoiMode("ra1", 1)).data
    b = extract(fmaps, [0, 1], boxes, RoiMode("raC", 1)).data
    assert a.tobytes() == b.tobytes()


def test_translation_consistency(rng):
    fmap = rng.normal(size=(8, 8, 3))
    shifted = np.zeros_like(fmap)
    shifted[:, 1:] = fmap[:, :-1]  # content moves one cell right
    box = np.array([0.125, 0.25, 0.5, 0.625])
    moved = box + np.array([1 / 8, 0, 1 / 8, 0])
    a = roi_align(T.Tensor(fmap), box, 1).data
    b = roi_align(T.Tensor(shifted), moved, 1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------- avg_overlap


def test_avg_examples():
    assert avg_overlap(MAP22, [0, 0, 1, 1]).data.item() == pytest.approx(2.5)
    assert avg_overlap(MAP22, [0.55, 0.6, 0.9, 0.95]).data.item() == 4.0
    assert avg_overlap(MAP22, [0, 0, 0.5, 1]).data.item() == pytest.approx(2.0)


def test_avg_tiny_box_falls_back_to_containing_cell():
    assert avg_overlap(MAP22, [0.25, 0.25, 0.25 + 1e-12, 0.25 + 1e-12]).data.item() == 1.0


@given(unit_boxes(), st.integers(0, 2**31 - 1))
def test_avg_matches_enumeration_oracle(box, seed):
    fmap = np.random.default_rng(seed).normal(size=(8, 8, 3))
    np.testing.assert_allclose(avg_overlap(T.Tensor(fmap), box).data, overlap_mean(fmap, box), atol=1e-12)


# ---------------------------------------------------------------- gradients


def test_roi_gradients_match_finite_differences(rng):
    boxes = np.array([[0.05, 0.1, 0.7, 0.95], [0.4, 0.3, 0.9, 0.6]])
    for mode in (RoiMode("ra1"), RoiMode("raC", 3), RoiMode("avg")):
        proj = rng.normal(size=(2, mode.feature_dim(3)))
        rep = T.grad_check(lambda m: T.sum_(extract(m, [0, 1], boxes, mode) * proj), [rng.normal(size=(2, 5, 5, 3))])
        assert rep.passed, (mode, rep.max_rel_error)


# ---------------------------------------------------------------- modes and shared grid


def test_mode_parsing_and_dims():
    assert RoiMode.parse("ra1") == RoiMode("ra1", 1)
    assert RoiMode.parse("ra7") == RoiMode("raC", 7)
    assert RoiMode.parse("avg").feature_dim(64) == 64
    assert RoiMode.parse("ra3").feature_dim(64) == 9 * 64
    assert RoiMode.parse("grid2") == RoiMode("shared_grid", 2)
    assert RoiMode("raC", 3).name == "ra3"
    with pytest.raises(ValueError):
        RoiMode.parse("max")
    with pytest.raises(ValueError):
        RoiMode("raC", 0)


def test_shared_grid_identity_quadrants():
    t = ViewTransform.identity()
    bi, bj = shared_grid_boxes(t, t, 2)
    np.testing.assert_allclose(bi, bj)
    want = [[0, 0, 0.5, 0.5], [0.5, 0, 1, 0.5], [0, 0.5, 0.5, 1], [0.5, 0.5, 1, 1]]
    np.testing.assert_allclose(sorted(bi.tolist()), sorted(want), atol=1e-12)


def test_shared_grid_hand_example():
    ti = ViewTransform(BoxXYXY(0, 0, 0.8, 0.8))
    tj = ViewTransform(BoxXYXY(0.2, 0.2, 1, 1))
    bi, bj = shared_grid_boxes(ti, tj, 1)
    np.testing.assert_allclose(bi, [[0.25, 0.25, 1, 1]], atol=1e-12)
    np.testing.assert_allclose(bj, [[0, 0, 0.75, 0.75]], atol=1e-12)


def test_shared_grid_disjoint_rejected():
    with pytest.raises(ValueError):
        shared_grid_boxes(ViewTransform(BoxXYXY(0, 0, 0.4, 1)), ViewTransform(BoxXYXY(0.6, 0, 1, 1)), 2)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_shared_grid_boxes_valid(seed, c):
    rng = np.random.default_rng(seed)

    def crop():
        w, h = rng.uniform(0.75, 1.0, 2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        return ViewTransform(BoxXYXY(x, y, x + w, y + h), bool(rng.random() < 0.5))

    bi, bj = shared_grid_boxes(crop(), crop(), c)
    assert bi.shape == bj.shape == (c * c, 4)
    assert np.all(is_valid_array(bi)) and np.all(is_valid_array(bj))
