"""Boxes, point sets, and conversions between them.

Coordinates are (x, y) with x growing rightward and y downward.  Boxes are
axis aligned.  A point set is an (n, 2) float array whose rows are (x, y)
points; the first two rows play a special role in ``EXPLICIT_CORNERS`` mode,
where they are read directly as the two box corners.

Everything here is a pure function on floats or small numpy arrays, shared
by target generation, losses, inference, and the training pipeline.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BoxXYXY",
    "BoxCWH",
    "ConversionMode",
    "points_to_box",
    "points_to_box_with_grad",
    "iou",
    "giou",
    "iou_xyxy",
    "giou_xyxy",
    "box_iou_matrix",
]


@dataclass(frozen=True)
class BoxXYXY:
    """Axis-aligned box as corner coordinates with x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box: {coords}")

    @staticmethod
    def spanning(p, q) -> "BoxXYXY":
        """Box spanned by two points, ordering each axis independently."""
        return BoxXYXY(
            min(p[0], q[0]), min(p[1], q[1]), max(p[0], q[0]), max(p[1], q[1])
        )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_cwh(self) -> "BoxCWH":
        return BoxCWH(
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.width,
            self.height,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def translate(self, dx: float, dy: float) -> "BoxXYXY":
        return BoxXYXY(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class BoxCWH:
    """Axis-aligned box as center plus width/height, both non-negative."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: w={self.w}, h={self.h}")

    def to_xyxy(self) -> BoxXYXY:
        return BoxXYXY(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


class ConversionMode(enum.Enum):
    """How a point set is read out as a box.

    MIN_MAX uses the axis-aligned hull of all points, PARTIAL_MIN_MAX the
    hull of the first ``subset_size`` points, MOMENT the per-axis mean plus
    or minus ``moment_multiplier`` standard deviations, and EXPLICIT_CORNERS
    reads points 0 and 1 as the two corners (ordering each axis).
    """

    MIN_MAX = "minmax"
    PARTIAL_MIN_MAX = "partial_minmax"
    MOMENT = "moment"
    EXPLICIT_CORNERS = "explicit_corners"


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"point set must have shape (n, 2), got {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("point set needs at least two points")
    return pts


def points_to_box(
    points,
    mode: ConversionMode = ConversionMode.MIN_MAX,
    *,
    subset_size: int = 4,
    moment_multiplier: float = 2.0,
) -> BoxXYXY:
    """Convert a point set to a box.

    Args:
        points: (n, 2) array of (x, y) points, n >= 2.
        mode: conversion rule, see :class:`ConversionMode`.
        subset_size: number of leading points used by PARTIAL_MIN_MAX.
        moment_multiplier: stddev multiplier used by MOMENT.

    Returns:
        The converted :class:`BoxXYXY`.
    """
    box, _ = points_to_box_with_grad(
        points, mode, subset_size=subset_size, moment_multiplier=moment_multiplier
    )
    return BoxXYXY(*box)


def points_to_box_with_grad(
    points,
    mode: ConversionMode = ConversionMode.MIN_MAX,
    *,
    subset_size: int = 4,
    moment_multiplier: float = 2.0,
):
    """Convert a point set to a box, also returning the chain-rule hook.

    Returns ``(box, backward)`` where ``box`` is a (4,) array
    ``[x1, y1, x2, y2]`` and ``backward(dbox)`` maps a gradient with respect
    to the box onto ``(dpoints, dmultiplier)``.  Min/max selections route the
    gradient to the first attaining point; the MOMENT standard-deviation term
    is treated as zero-gradient when all points coincide.
    """
    pts = _as_points(points)
    n = pts.shape[0]

    if mode is ConversionMode.EXPLICIT_CORNERS:
        sub = pts[:2]
    elif mode is ConversionMode.PARTIAL_MIN_MAX:
        if subset_size < 2:
            raise ValueError(f"subset_size must be >= 2, got {subset_size}")
        sub = pts[: min(subset_size, n)]
    else:
        sub = pts

    if mode is ConversionMode.MOMENT:
        mean = sub.mean(axis=0)
        centered = sub - mean
        var = np.mean(centered**2, axis=0)
        std = np.sqrt(var)
        m = float(moment_multiplier)
        box = np.array(
            [mean[0] - m * std[0], mean[1] - m * std[1],
             mean[0] + m * std[0], mean[1] + m * std[1]]
        )

        def backward(dbox):
            dbox = np.asarray(dbox, dtype=np.float64)
            dpts = np.zeros_like(pts)
            dmult = 0.0
            k = sub.shape[0]
            for axis in range(2):
                dlo, dhi = dbox[axis], dbox[axis + 2]
                dmean = dlo + dhi
                dstd = m * (dhi - dlo)
                dpts[:k, axis] += dmean / k
                if std[axis] > 0.0:
                    dpts[:k, axis] += dstd * centered[:, axis] / (k * std[axis])
                dmult += (dhi - dlo) * std[axis]
            return dpts, dmult

        return box, backward

    # All remaining modes are min/max selections over `sub`.
    lo_idx = np.argmin(sub, axis=0)
    hi_idx = np.argmax(sub, axis=0)
    box = np.array(
        [sub[lo_idx[0], 0], sub[lo_idx[1], 1], sub[hi_idx[0], 0], sub[hi_idx[1], 1]]
    )

    def backward(dbox):
        dbox = np.asarray(dbox, dtype=np.float64)
        dpts = np.zeros_like(pts)
        dpts[lo_idx[0], 0] += dbox[0]
        dpts[lo_idx[1], 1] += dbox[1]
        dpts[hi_idx[0], 0] += dbox[2]
        dpts[hi_idx[1], 1] += dbox[3]
        return dpts, 0.0

    return box, backward


def _coords(box) -> tuple[float, float, float, float]:
    if isinstance(box, BoxXYXY):
        return box.x1, box.y1, box.x2, box.y2
    x1, y1, x2, y2 = (float(v) for v in box)
    return x1, y1, x2, y2


def iou_xyxy(a, b) -> float:
    """IoU of two boxes given as (x1, y1, x2, y2) sequences.

    Degenerate or inverted extents count as zero area, so the result is
    always in [0, 1] and defined for every input.
    """
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou_xyxy(a, b) -> float:
    """Generalized IoU: IoU minus the hull-area penalty, in [-1, 1]."""
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if union <= 0.0:
        return 0.0
    base = inter / union
    if hull <= 0.0:
        return base
    return base - (hull - union) / hull


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """IoU of two boxes; 1 iff the boxes are equal with positive area."""
    return iou_xyxy(a, b)


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Generalized IoU of two boxes (equals IoU when one contains the other)."""
    return giou_xyxy(a, b)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) arrays of xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
