"""Boxes, IoU/GIoU, and point-set conversions."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from pointdet.geometry import (
    BoxCWH,
    BoxXYXY,
    ConversionMode,
    box_iou_matrix,
    giou_xyxy,
    iou_xyxy,
    points_to_box,
    points_to_box_with_grad,
)

coord = st.floats(-100, 100, allow_nan=False, allow_subnormal=False)
side = st.floats(0.0, 50, allow_nan=False, allow_subnormal=False)


def test_explicit_corners_worked_value():
    pts = np.array([[2.0, 3.0], [10.0, 7.0], [5.0, 5.0]])
    box = points_to_box(pts, ConversionMode.EXPLICIT_CORNERS)
    assert box == BoxXYXY(2.0, 3.0, 10.0, 7.0)
    assert box.to_cwh() == BoxCWH(6.0, 5.0, 8.0, 4.0)


def test_explicit_corners_orders_each_axis():
    # corner points given in scrambled order: (10, 3) and (2, 7)
    box = points_to_box(np.array([[10.0, 3.0], [2.0, 7.0]]), ConversionMode.EXPLICIT_CORNERS)
    assert box == BoxXYXY(2.0, 3.0, 10.0, 7.0)


def test_min_max_worked_value():
    pts = np.array([[1.0, 1.0], [4.0, 2.0], [2.0, 5.0]])
    assert points_to_box(pts, ConversionMode.MIN_MAX) == BoxXYXY(1.0, 1.0, 4.0, 5.0)


def test_partial_min_max_ignores_trailing_points():
    pts = np.array([[1.0, 1.0], [4.0, 2.0], [2.0, 5.0], [3.0, 3.0], [99.0, -99.0]])
    box = points_to_box(pts, ConversionMode.PARTIAL_MIN_MAX, subset_size=4)
    assert box == BoxXYXY(1.0, 1.0, 4.0, 5.0)


def test_moment_mode_is_mean_plus_minus_scaled_std():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [2.0, 4.0]])
    box = points_to_box(pts, ConversionMode.MOMENT, moment_multiplier=2.0)
    # mean (1, 2), std (1, 2) -> (1 - 2, 2 - 4, 1 + 2, 2 + 4)
    assert box == BoxXYXY(-1.0, -2.0, 3.0, 6.0)
    half = points_to_box(pts, ConversionMode.MOMENT, moment_multiplier=0.5)
    assert half == BoxXYXY(0.5, 1.0, 1.5, 3.0)


def test_min_max_hull_contains_all_points():
    for k in range(50):
        rng = np.random.default_rng(k)
        pts = rng.uniform(-10, 10, size=(9, 2))
        box = points_to_box(pts, ConversionMode.MIN_MAX)
        assert np.all(pts[:, 0] >= box.x1 - 1e-12)
        assert np.all(pts[:, 0] <= box.x2 + 1e-12)
        assert np.all(pts[:, 1] >= box.y1 - 1e-12)
        assert np.all(pts[:, 1] <= box.y2 + 1e-12)


def test_min_max_grad_routes_to_first_attaining_point():
    # two points tie for the x minimum; index 0 must receive the gradient
    pts = np.array([[1.0, 5.0], [1.0, 2.0], [4.0, 3.0]])
    _, back = points_to_box_with_grad(pts, ConversionMode.MIN_MAX)
    dpts, dmult = back(np.array([1.0, 0.0, 0.0, 0.0]))
    assert dmult == 0.0
    assert dpts[0, 0] == 1.0
    assert np.count_nonzero(dpts) == 1


def test_moment_grad_zero_for_coincident_points():
    pts = np.ones((5, 2)) * 3.0
    box, back = points_to_box_with_grad(pts, ConversionMode.MOMENT)
    assert np.allclose(box, [3.0, 3.0, 3.0, 3.0])
    dpts, dmult = back(np.array([0.0, 0.0, 1.0, 1.0]))
    # the mean part still flows; the std part is defined as zero
    assert np.allclose(dpts, np.full((5, 2), 0.2))
    assert dmult == 0.0


def test_iou_worked_value():
    assert iou_xyxy((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1.0 / 3.0)


def test_giou_worked_values():
    assert giou_xyxy((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1.0 / 3.0)
    # exactly touching boxes: hull area equals union area
    assert giou_xyxy((0, 0, 1, 1), (1, 0, 2, 1)) == pytest.approx(0.0)
    # identical boxes
    assert giou_xyxy((0, 0, 2, 3), (0, 0, 2, 3)) == pytest.approx(1.0)


def test_iou_degenerate_boxes_are_zero():
    assert iou_xyxy((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0
    assert iou_xyxy((0, 0, 0, 5), (0, 0, 5, 5)) == 0.0
    assert giou_xyxy((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


@given(
    x1=coord, y1=coord, w1=side, h1=side,
    x2=coord, y2=coord, w2=side, h2=side,
)
def test_iou_symmetric_and_bounded(x1, y1, w1, h1, x2, y2, w2, h2):
    a = (x1, y1, x1 + w1, y1 + h1)
    b = (x2, y2, x2 + w2, y2 + h2)
    v = iou_xyxy(a, b)
    assert v == iou_xyxy(b, a)
    assert 0.0 <= v <= 1.0 + 1e-12
    g = giou_xyxy(a, b)
    assert -1.0 - 1e-12 <= g <= 1.0 + 1e-12
    assert g <= v + 1e-12


@given(x=coord, y=coord, w=st.floats(0.1, 50), h=st.floats(0.1, 50))
def test_self_iou_is_one(x, y, w, h):
    box = (x, y, x + w, y + h)
    assert iou_xyxy(box, box) == pytest.approx(1.0)
    assert giou_xyxy(box, box) == pytest.approx(1.0)


def test_iou_matrix_matches_pairwise_scalar():
    for k in range(50):
        rng = np.random.default_rng(1000 + k)
        na, nb = rng.integers(1, 6, size=2)
        a = rng.uniform(0, 20, size=(na, 4))
        b = rng.uniform(0, 20, size=(nb, 4))
        a[:, 2:] = a[:, :2] + rng.uniform(0, 10, size=(na, 2))
        b[:, 2:] = b[:, :2] + rng.uniform(0, 10, size=(nb, 2))
        mat = box_iou_matrix(a, b)
        for i in range(na):
            for j in range(nb):
                assert mat[i, j] == pytest.approx(iou_xyxy(a[i], b[j]), abs=1e-12)


def test_box_validation():
    with pytest.raises(ValueError):
        BoxXYXY(3.0, 0.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        BoxXYXY(0.0, 0.0, float("nan"), 1.0)
    with pytest.raises(ValueError):
        BoxCWH(0.0, 0.0, -1.0, 2.0)


def test_spanning_and_translate():
    box = BoxXYXY.spanning((5.0, 1.0), (2.0, 4.0))
    assert box == BoxXYXY(2.0, 1.0, 5.0, 4.0)
    assert box.translate(1.0, -1.0) == BoxXYXY(3.0, 0.0, 6.0, 3.0)


def test_points_validation():
    with pytest.raises(ValueError):
        points_to_box(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        points_to_box(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        points_to_box(np.zeros((4, 2)), ConversionMode.PARTIAL_MIN_MAX, subset_size=1)


def test_cwh_round_trip():
    for k in range(20):
        rng = np.random.default_rng(k)
        x1, y1 = rng.uniform(-5, 5, 2)
        w, h = rng.uniform(0, 10, 2)
        box = BoxXYXY(x1, y1, x1 + w, y1 + h)
        back = box.to_cwh().to_xyxy()
        assert np.allclose(back.as_array(), box.as_array())
