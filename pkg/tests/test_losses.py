"""Worked values and properties for the training losses."""
import math

import numpy as np
import pytest

from pointdet.losses import (
    EPS,
    FocalParams,
    LossOutput,
    LossWeights,
    RegressionMode,
    corner_heatmap_loss,
    corner_loss,
    focal_loss,
    giou_with_grad,
    normalized_focal_loss,
    offset_loss,
    regression_loss,
    smooth_l1,
    total_loss,
)
from pointdet.targets import (
    BOTTOM_RIGHT,
    TOP_LEFT,
    CornerOffsetEntry,
    CornerTarget,
    ForegroundTarget,
)

LN2 = math.log(2.0)


def _corner_target(shape=(2, 4, 4), positives=(), heat=None):
    """Small hand-built corner target; ``positives`` is [(ch, y, x), ...]."""
    heatmap = np.zeros(shape) if heat is None else np.asarray(heat, dtype=np.float64)
    pos = np.zeros(shape, dtype=bool)
    for ch, y, x in positives:
        pos[ch, y, x] = True
        heatmap[ch, y, x] = 1.0
    return CornerTarget(heatmap, pos)


# --------------------------------------------------------------- corner focal
def test_corner_focal_lone_positive_half_confidence():
    # single positive cell at p = 0.5, N = 1: (1-p)^2 * -log(p) = 0.25 ln 2
    target = _corner_target(positives=[(TOP_LEFT, 1, 1)])
    pred = np.full((2, 4, 4), EPS)
    pred[TOP_LEFT, 1, 1] = 0.5
    out = corner_heatmap_loss(pred, target, num_objects=1)
    assert out.value == pytest.approx(0.25 * LN2, abs=1e-9)


def test_corner_focal_lone_negative_with_penalty():
    # one negative cell, Gaussian weight y = 0.5, p = 0.5:
    # (1-y)^4 p^2 (-log(1-p)) = 0.0625 * 0.25 * ln 2
    heat = np.zeros((2, 1, 1))
    heat[TOP_LEFT, 0, 0] = 0.5
    target = CornerTarget(heat, np.zeros((2, 1, 1), dtype=bool))
    pred = np.full((2, 1, 1), EPS)
    pred[TOP_LEFT, 0, 0] = 0.5
    out = corner_heatmap_loss(pred, target, num_objects=1)
    assert out.value == pytest.approx(0.0625 * 0.25 * LN2, abs=1e-9)


def test_corner_focal_scales_by_object_count():
    target = _corner_target(positives=[(TOP_LEFT, 1, 1)])
    pred = np.full((2, 4, 4), EPS)
    pred[TOP_LEFT, 1, 1] = 0.5
    one = corner_heatmap_loss(pred, target, num_objects=1)
    three = corner_heatmap_loss(pred, target, num_objects=3)
    assert three.value == pytest.approx(one.value / 3.0, abs=1e-12)


def test_corner_focal_perfect_prediction_is_tiny():
    target = _corner_target(positives=[(TOP_LEFT, 0, 0), (BOTTOM_RIGHT, 3, 3)])
    pred = np.full((2, 4, 4), EPS)
    pred[target.pos_mask] = 1.0 - EPS
    out = corner_heatmap_loss(pred, target, num_objects=2)
    assert out.value < 1e-5


def test_corner_focal_shape_mismatch():
    target = _corner_target()
    with pytest.raises(ValueError):
        corner_heatmap_loss(np.zeros((2, 3, 3)), target, num_objects=1)


# -------------------------------------------------------------------- offsets
def test_offset_loss_quadratic_branch_worked_value():
    # residual (0.5, 0): 0.5 * 0.5^2 / 1 = 0.125
    out = offset_loss(np.array([[0.5, 0.0]]), np.array([[0.0, 0.0]]))
    assert out.value == pytest.approx(0.125, abs=1e-12)


def test_offset_loss_linear_branch_worked_value():
    # residual (2, 0): |2| - 0.5 = 1.5
    out = offset_loss(np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]]))
    assert out.value == pytest.approx(1.5, abs=1e-12)


def test_offset_loss_exact_match_is_zero():
    t = np.random.default_rng(3).uniform(0, 1, size=(7, 2))
    out = offset_loss(t.copy(), t)
    assert out.value == 0.0
    assert np.all(out.grad == 0.0)


def test_offset_loss_averages_over_corners():
    pred = np.array([[0.5, 0.0], [0.0, 0.5]])
    out = offset_loss(pred, np.zeros((2, 2)))
    # each corner contributes 0.125; mean over 2 corners is still 0.125
    assert out.value == pytest.approx(0.125, abs=1e-12)


def test_offset_loss_empty_is_zero():
    out = offset_loss(np.zeros((0, 2)), np.zeros((0, 2)))
    assert out.value == 0.0


def test_offset_loss_rejects_bad_shapes():
    with pytest.raises(ValueError):
        offset_loss(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        offset_loss(np.zeros((2, 3)), np.zeros((2, 3)))


def test_smooth_l1_transition_continuity():
    lo, dlo = smooth_l1(np.array([1.0 - 1e-9]))
    hi, dhi = smooth_l1(np.array([1.0 + 1e-9]))
    assert lo[0] == pytest.approx(hi[0], abs=1e-8)
    assert dlo[0] == pytest.approx(dhi[0], abs=1e-8)


# ---------------------------------------------------------------- corner sum
def test_corner_loss_is_sum_of_components():
    # heatmap part 0.25 ln 2, offset part 0.125 -> 0.2983...
    target = _corner_target(positives=[(TOP_LEFT, 1, 1)])
    target.offsets.append(CornerOffsetEntry(TOP_LEFT, 1, 1, 0.0, 0.0))
    heat_pred = np.full((2, 4, 4), EPS)
    heat_pred[TOP_LEFT, 1, 1] = 0.5
    off_pred = np.array([[0.5, 0.0]])
    out = corner_loss(heat_pred, off_pred, target, num_objects=1)
    assert out.value == pytest.approx(0.25 * LN2 + 0.125, abs=1e-9)
    assert out.value == pytest.approx(0.2983, abs=5e-4)
    assert out.heatmap.value == pytest.approx(0.25 * LN2, abs=1e-9)
    assert out.offsets.value == pytest.approx(0.125, abs=1e-12)


# ------------------------------------------------------- normalized focal loss
def _uniform_object_target(size_s: int, p_channels=1):
    """One object of S positive cells, all carrying weight 1/S."""
    label = np.zeros((p_channels, 1, size_s))
    weight = np.zeros_like(label)
    label[0, 0, :] = 1.0
    weight[0, 0, :] = 1.0 / size_s
    return ForegroundTarget(label, weight, num_positive=size_s, weight_sum=1.0)


@pytest.mark.parametrize("size_s", [1, 6, 64])
def test_normalized_focal_positive_term_size_invariant(size_s):
    # constant p = 0.5 on a single object's cells: 0.25 * (0.5)^2 * ln 2,
    # independent of the cell count S
    target = _uniform_object_target(size_s)
    pred = np.full(target.label.shape, 0.5)
    out = normalized_focal_loss(pred, target)
    assert out.positive_value == pytest.approx(0.25 * 0.25 * LN2, abs=1e-9)
    assert out.negative_value == 0.0


def test_normalized_focal_negative_worked_value():
    # one negative cell at p = 0.5 with N = 2 positives elsewhere:
    # (1/2) * 0.75 * 0.25 * ln 2
    label = np.zeros((1, 1, 3))
    weight = np.zeros_like(label)
    label[0, 0, :2] = 1.0
    weight[0, 0, :2] = 0.5
    target = ForegroundTarget(label, weight, num_positive=2, weight_sum=1.0)
    pred = np.full((1, 1, 3), EPS)
    pred[0, 0, :2] = 1.0 - EPS
    pred[0, 0, 2] = 0.5
    out = normalized_focal_loss(pred, target)
    assert out.negative_value == pytest.approx(0.5 * 0.75 * 0.25 * LN2, abs=1e-9)


def test_normalized_focal_empty_scene_is_zero():
    target = ForegroundTarget(
        np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), num_positive=0, weight_sum=0.0
    )
    out = normalized_focal_loss(np.full((2, 2, 2), 0.7), target)
    assert out.value == 0.0
    assert np.all(out.grad == 0.0)


def test_normalized_focal_perfect_prediction():
    target = _uniform_object_target(6)
    pred = np.where(target.label > 0, 1.0 - EPS, EPS)
    out = normalized_focal_loss(pred, target)
    assert out.value < 1e-5


# ------------------------------------------------------------------ focal loss
def test_focal_loss_normalizer_floor():
    pred = np.array([0.5])
    out = focal_loss(pred, np.array([1.0]), normalizer=0.0)
    # normalizer clamps to 1
    assert out.value == pytest.approx(0.25 * 0.25 * LN2, abs=1e-12)


# ------------------------------------------------------------- regression loss
def test_regression_loss_zero_at_target_both_modes():
    boxes = np.array([[1.0, 2.0, 5.0, 7.0], [0.0, 0.0, 3.0, 3.0]])
    for mode in RegressionMode:
        out = regression_loss(boxes.copy(), boxes, mode)
        assert out.value == pytest.approx(0.0, abs=1e-12)


def test_regression_loss_giou_disjoint_worked_value():
    # disjoint unit squares with hull 3x1: giou = 0 + 2/3 - 1 = -1/3,
    # loss = 1 - giou = 4/3
    pred = np.array([[0.0, 0.0, 1.0, 1.0]])
    gt = np.array([[2.0, 0.0, 3.0, 1.0]])
    out = regression_loss(pred, gt, RegressionMode.GIOU)
    assert out.value == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_regression_loss_smooth_l1_equals_elementwise_mean():
    rng = np.random.default_rng(11)
    pred = rng.uniform(0, 10, size=(6, 4))
    gt = rng.uniform(0, 10, size=(6, 4))
    out = regression_loss(pred, gt, RegressionMode.SMOOTH_L1)
    values, _ = smooth_l1(pred - gt)
    assert out.value == pytest.approx(values.mean(), abs=1e-12)


def test_regression_loss_empty_match_set():
    out = regression_loss(np.zeros((0, 4)), np.zeros((0, 4)), RegressionMode.GIOU)
    assert out.value == 0.0


def test_giou_grad_matches_value_definition():
    # giou value from giou_with_grad agrees with an independent computation
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = np.sort(rng.uniform(0, 10, size=4)).reshape(4)
        a = np.array([a[0], a[1], a[2], a[3]])
        b = np.sort(rng.uniform(0, 10, size=4))
        a_box = np.array([min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3])])
        b_box = np.array([min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])])
        if a_box[2] - a_box[0] < 1e-3 or a_box[3] - a_box[1] < 1e-3:
            continue
        if b_box[2] - b_box[0] < 1e-3 or b_box[3] - b_box[1] < 1e-3:
            continue
        val, _ = giou_with_grad(a_box, b_box)
        from pointdet.geometry import giou_xyxy

        assert val == pytest.approx(giou_xyxy(a_box, b_box), abs=1e-12)


# ------------------------------------------------------------------ total loss
def _loss(value, shape=(1,)):
    return LossOutput(value, np.zeros(shape))


def test_total_loss_weighted_sum_worked_value():
    from pointdet.losses import CornerLossOutput

    corner = CornerLossOutput(0.4, _loss(0.4), _loss(0.0))
    out = total_loss(_loss(1.0), corner, _loss(0.5))
    assert out.value == pytest.approx(1.0 + 0.25 * 0.4 + 0.1 * 0.5, abs=1e-12)
    assert out.value == pytest.approx(1.15, abs=1e-12)


def test_total_loss_zero_weights_reduce_to_regression():
    from pointdet.losses import CornerLossOutput

    corner = CornerLossOutput(0.4, _loss(0.4), _loss(0.0))
    out = total_loss(_loss(1.0), corner, _loss(0.5), LossWeights(corner=0.0, foreground=0.0))
    assert out.value == pytest.approx(1.0, abs=1e-15)
    assert np.all(out.corner_heatmap == 0.0)
    assert np.all(out.foreground == 0.0)


def test_total_loss_gradients_carry_weights():
    from pointdet.losses import CornerLossOutput

    g = np.ones(3)
    corner = CornerLossOutput(1.0, LossOutput(1.0, g), LossOutput(0.0, g * 2))
    out = total_loss(_loss(0.0), corner, LossOutput(1.0, g * 4))
    assert np.allclose(out.corner_heatmap, 0.25)
    assert np.allclose(out.corner_offsets, 0.5)
    assert np.allclose(out.foreground, 0.4)


# ------------------------------------------------------------- sanity at clamp
def test_losses_finite_at_extreme_predictions():
    target = _corner_target(positives=[(TOP_LEFT, 0, 0)])
    for p in (0.0, 1.0):
        out = corner_heatmap_loss(np.full((2, 4, 4), p), target, num_objects=1)
        assert math.isfinite(out.value)
        assert np.all(np.isfinite(out.grad))


def test_losses_nonnegative_on_random_inputs():
    rng = np.random.default_rng(17)
    for _ in range(25):
        target = _corner_target(positives=[(TOP_LEFT, 2, 1), (BOTTOM_RIGHT, 0, 3)])
        pred = rng.uniform(0.01, 0.99, size=(2, 4, 4))
        assert corner_heatmap_loss(pred, target, 2).value >= 0.0
        off = rng.uniform(-2, 2, size=(4, 2))
        assert offset_loss(off, rng.uniform(0, 1, size=(4, 2))).value >= 0.0
