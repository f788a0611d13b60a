"""Training losses with hand-derived analytic gradients.

Every loss returns its scalar value together with the gradient of that value
with respect to the prediction argument, so the training graph can backprop
through them without numeric differentiation.  Probabilities are clamped to
``[EPS, 1 - EPS]`` before logs; gradient checks sample away from the clamp.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import ConversionMode, points_to_box_with_grad
from .targets import CornerTarget, ForegroundTarget

__all__ = [
    "EPS",
    "LossOutput",
    "CornerLossOutput",
    "ForegroundLossOutput",
    "FocalParams",
    "LossWeights",
    "RegressionMode",
    "TotalLoss",
    "corner_heatmap_loss",
    "offset_loss",
    "corner_loss",
    "normalized_focal_loss",
    "focal_loss",
    "smooth_l1",
    "giou_with_grad",
    "regression_loss",
    "points_regression_loss",
    "total_loss",
]

EPS = 1e-6


@dataclass
class LossOutput:
    """Scalar loss value plus gradient w.r.t. the prediction array."""

    value: float
    grad: np.ndarray


@dataclass
class CornerLossOutput:
    value: float
    heatmap: LossOutput
    offsets: LossOutput


@dataclass
class ForegroundLossOutput(LossOutput):
    positive_value: float = 0.0
    negative_value: float = 0.0


@dataclass(frozen=True)
class FocalParams:
    """Exponents for the heatmap and foreground focal losses."""

    heatmap_alpha: float = 2.0
    heatmap_beta: float = 4.0
    fg_alpha: float = 0.25
    fg_gamma: float = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the verification terms in the total training loss."""

    corner: float = 0.25
    foreground: float = 0.1


class RegressionMode(enum.Enum):
    SMOOTH_L1 = "smooth_l1"
    GIOU = "giou"


def _clamped(pred: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(pred, dtype=np.float64), EPS, 1.0 - EPS)


def corner_heatmap_loss(
    pred: np.ndarray,
    target: CornerTarget,
    num_objects: int,
    params: FocalParams = FocalParams(),
) -> LossOutput:
    """Penalty-reduced focal loss on corner heatmaps.

    Positive cells contribute ``-(1-p)^alpha log p``; all others contribute
    ``-(1-y)^beta p^alpha log(1-p)`` where y is the Gaussian penalty weight.
    The sum is scaled by 1/max(num_objects, 1).

    Args:
        pred: (2, H, W) heatmap probabilities.
        target: corner target holding the penalty heatmap and positive mask.
        num_objects: ground-truth object count N of the scene.
    """
    p = _clamped(pred)
    if p.shape != target.heatmap.shape:
        raise ValueError(f"pred {p.shape} does not match target {target.heatmap.shape}")
    a, b = params.heatmap_alpha, params.heatmap_beta
    pos = target.pos_mask
    scale = 1.0 / max(num_objects, 1)
    y = target.heatmap

    pos_term = -((1.0 - p) ** a) * np.log(p)
    neg_term = -((1.0 - y) ** b) * (p**a) * np.log(1.0 - p)
    value = scale * (pos_term[pos].sum() + neg_term[~pos].sum())

    grad = np.where(
        pos,
        a * (1.0 - p) ** (a - 1.0) * np.log(p) - (1.0 - p) ** a / p,
        (1.0 - y) ** b * (p ** (a - 1.0)) * (p / (1.0 - p) - a * np.log(1.0 - p)),
    )
    return LossOutput(float(value), scale * grad)


def smooth_l1(residual: np.ndarray, delta: float = 1.0):
    """Elementwise smooth-L1 value and derivative w.r.t. the residual.

    Quadratic ``0.5 r^2 / delta`` inside ``|r| < delta``, linear
    ``|r| - 0.5 delta`` outside.
    """
    r = np.asarray(residual, dtype=np.float64)
    absr = np.abs(r)
    quad = absr < delta
    value = np.where(quad, 0.5 * r * r / delta, absr - 0.5 * delta)
    grad = np.where(quad, r / delta, np.sign(r))
    return value, grad


def offset_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> LossOutput:
    """Smooth-L1 on sub-pixel corner offsets, averaged over corners.

    Args:
        pred: (K, 2) predicted offsets, one row per supervised corner.
        target: (K, 2) target offsets aligned with ``pred``.

    Each corner contributes the sum of its two per-axis smooth-L1 terms; the
    result is the mean over the K corners.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"offset shapes must match as (K, 2), got {p.shape} vs {t.shape}")
    k = p.shape[0]
    if k == 0:
        return LossOutput(0.0, np.zeros_like(p))
    value, grad = smooth_l1(p - t, delta)
    return LossOutput(float(value.sum() / k), grad / k)


def corner_loss(
    heat_pred: np.ndarray,
    offset_pred: np.ndarray,
    target: CornerTarget,
    num_objects: int,
    params: FocalParams = FocalParams(),
) -> CornerLossOutput:
    """Combined corner verification loss: heatmap focal plus offset smooth-L1."""
    heat = corner_heatmap_loss(heat_pred, target, num_objects, params)
    toff = np.array([[e.target_x, e.target_y] for e in target.offsets], dtype=np.float64)
    toff = toff.reshape(-1, 2)
    off = offset_loss(np.asarray(offset_pred, dtype=np.float64).reshape(-1, 2), toff)
    return CornerLossOutput(heat.value + off.value, heat, off)


def normalized_focal_loss(
    pred: np.ndarray,
    target: ForegroundTarget,
    params: FocalParams = FocalParams(),
) -> ForegroundLossOutput:
    """Weighted focal loss for the category-aware foreground map.

    Positive cells carry weight ``w`` (1/object-size) normalized by the total
    weight mass; negatives are normalized by the positive count.  An empty
    target (no positives) yields a zero loss by definition.

    Args:
        pred: (C, H, W) foreground probabilities.
        target: foreground target with labels, weights and counts.
    """
    p = _clamped(pred)
    if p.shape != target.label.shape:
        raise ValueError(f"pred {p.shape} does not match target {target.label.shape}")
    n = target.num_positive
    if n == 0:
        return ForegroundLossOutput(0.0, np.zeros_like(p))
    alpha, gamma = params.fg_alpha, params.fg_gamma
    pos = target.label > 0
    w = target.weight

    pos_term = -(w / target.weight_sum) * alpha * (1.0 - p) ** gamma * np.log(p)
    neg_term = -(1.0 / n) * (1.0 - alpha) * p**gamma * np.log(1.0 - p)
    pos_value = float(pos_term[pos].sum())
    neg_value = float(neg_term[~pos].sum())

    grad = np.where(
        pos,
        (w / target.weight_sum)
        * alpha
        * (gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - (1.0 - p) ** gamma / p),
        (1.0 / n)
        * (1.0 - alpha)
        * (p ** (gamma - 1.0))
        * (p / (1.0 - p) - gamma * np.log(1.0 - p)),
    )
    return ForegroundLossOutput(pos_value + neg_value, grad, pos_value, neg_value)


def focal_loss(
    pred: np.ndarray,
    target: np.ndarray,
    normalizer: float,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> LossOutput:
    """Plain sigmoid focal loss used by the detector's classification head.

    Args:
        pred: probabilities of any shape.
        target: same-shape {0, 1} labels.
        normalizer: divisor, typically the positive-sample count (>= 1).
    """
    p = _clamped(pred)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} does not match target {t.shape}")
    norm = max(float(normalizer), 1.0)
    pos = t > 0
    value = np.where(
        pos,
        -alpha * (1.0 - p) ** gamma * np.log(p),
        -(1.0 - alpha) * p**gamma * np.log(1.0 - p),
    )
    grad = np.where(
        pos,
        alpha * (gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - (1.0 - p) ** gamma / p),
        (1.0 - alpha) * (p ** (gamma - 1.0)) * (p / (1.0 - p) - gamma * np.log(1.0 - p)),
    )
    return LossOutput(float(value.sum() / norm), grad / norm)


def giou_with_grad(a: np.ndarray, b: np.ndarray):
    """Generalized IoU of box ``a`` against fixed box ``b`` with d(giou)/da.

    Both boxes are (4,) xyxy arrays.  Piecewise-linear switch points (corner
    ties, exactly touching boxes) take one-sided derivatives.
    """
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    overlap = iw > 0.0 and ih > 0.0
    inter = iw * ih if overlap else 0.0
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    hw = max(ax2, bx2) - min(ax1, bx1)
    hh = max(ay2, by2) - min(ay1, by1)
    hull = hw * hh
    if union <= 0.0:
        return 0.0, np.zeros(4)
    giou = inter / union + (union / hull if hull > 0.0 else 1.0) - 1.0

    # d inter / d a
    dI = np.zeros(4)
    if overlap:
        dI[0] = -ih if ax1 > bx1 else 0.0
        dI[2] = ih if ax2 < bx2 else 0.0
        dI[1] = -iw if ay1 > by1 else 0.0
        dI[3] = iw if ay2 < by2 else 0.0
    # d area_a / d a
    dA = np.array([-(ay2 - ay1), -(ax2 - ax1), ay2 - ay1, ax2 - ax1])
    dU = dA - dI
    # d hull / d a
    dH = np.zeros(4)
    dH[0] = -hh if ax1 < bx1 else 0.0
    dH[2] = hh if ax2 > bx2 else 0.0
    dH[1] = -hw if ay1 < by1 else 0.0
    dH[3] = hw if ay2 > by2 else 0.0

    grad = (dI * union - inter * dU) / (union * union)
    if hull > 0.0:
        grad += (dU * hull - union * dH) / (hull * hull)
    return float(giou), grad


def regression_loss(
    pred: np.ndarray, gt: np.ndarray, mode: RegressionMode = RegressionMode.SMOOTH_L1
) -> LossOutput:
    """Box regression loss over matched prediction/ground-truth pairs.

    SMOOTH_L1 averages the elementwise smooth-L1 over all 4M box parameters;
    GIOU averages ``1 - giou`` over the M pairs.  An empty match set yields a
    zero loss.

    Args:
        pred: (M, 4) predicted xyxy boxes.
        gt: (M, 4) matched ground-truth boxes.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} does not match gt {g.shape}")
    m = p.shape[0]
    if m == 0:
        return LossOutput(0.0, np.zeros_like(p))
    if mode is RegressionMode.SMOOTH_L1:
        value, grad = smooth_l1(p - g)
        return LossOutput(float(value.mean()), grad / value.size)
    values = np.empty(m)
    grad = np.empty_like(p)
    for i in range(m):
        gi, dgi = giou_with_grad(p[i], g[i])
        values[i] = 1.0 - gi
        grad[i] = -dgi / m
    return LossOutput(float(values.mean()), grad)


def points_regression_loss(
    point_sets: np.ndarray,
    gt: np.ndarray,
    mode: RegressionMode,
    conversion: ConversionMode,
    *,
    subset_size: int = 4,
    moment_multiplier: float = 2.0,
):
    """Box regression applied to raw point sets via a conversion function.

    Args:
        point_sets: (M, n, 2) predicted point sets in pixels.
        gt: (M, 4) matched ground-truth xyxy boxes.

    Returns ``(LossOutput with grad w.r.t. point_sets, d loss / d multiplier)``
    chaining the box-conversion jacobian into the regression gradient.
    """
    pts = np.asarray(point_sets, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if pts.ndim != 3 or pts.shape[0] != g.shape[0] or pts.shape[2] != 2:
        raise ValueError(f"point sets {pts.shape} do not match gt {g.shape}")
    m = pts.shape[0]
    if m == 0:
        return LossOutput(0.0, np.zeros_like(pts)), 0.0
    boxes = np.empty((m, 4))
    backwards = []
    for i in range(m):
        box, back = points_to_box_with_grad(
            pts[i], conversion, subset_size=subset_size, moment_multiplier=moment_multiplier
        )
        boxes[i] = box
        backwards.append(back)
    box_loss = regression_loss(boxes, g, mode)
    grad_pts = np.zeros_like(pts)
    grad_mult = 0.0
    for i in range(m):
        dpts, dmult = backwards[i](box_loss.grad[i])
        grad_pts[i] = dpts
        grad_mult += dmult
    return LossOutput(box_loss.value, grad_pts), grad_mult


@dataclass
class TotalLoss:
    """Weighted multi-task objective and its per-component weighted grads."""

    value: float
    regression: np.ndarray
    corner_heatmap: np.ndarray
    corner_offsets: np.ndarray
    foreground: np.ndarray
    components: dict = field(default_factory=dict)


def total_loss(
    regression: LossOutput,
    corner: CornerLossOutput,
    foreground: LossOutput,
    weights: LossWeights = LossWeights(),
) -> TotalLoss:
    """Combine regression and verification losses with their weights.

    The gradient of each component comes back scaled by its weight, ready to
    be applied to the producing head.
    """
    value = (
        regression.value + weights.corner * corner.value + weights.foreground * foreground.value
    )
    return TotalLoss(
        float(value),
        regression.grad,
        weights.corner * corner.heatmap.grad,
        weights.corner * corner.offsets.grad,
        weights.foreground * foreground.grad,
        components={
            "regression": regression.value,
            "corner": corner.value,
            "foreground": foreground.value,
        },
    )
