"""Per-level ground-truth targets for verification and detection training.

Corner targets follow the penalty-reduced heatmap recipe: each ground-truth
corner marks exactly one positive cell per pyramid level (its quantized
location), every other cell carries the largest Gaussian penalty weight over
all corners of that type, and a sub-pixel offset entry records where inside
the cell the corner actually fell.  Foreground targets are category-aware
occupancy maps with per-cell weights that sum to one per object.

Every object is assigned to every level; there is no size-based level
selection at this scale.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .scenes import GtScene

logger = logging.getLogger(__name__)

__all__ = [
    "TOP_LEFT",
    "BOTTOM_RIGHT",
    "LevelSpec",
    "CornerOffsetEntry",
    "CornerTarget",
    "ForegroundTarget",
    "LevelTargets",
    "CellMatch",
    "quantize",
    "offset_target",
    "corner_gaussian_sigma",
    "corner_radius",
    "build_corner_target",
    "build_foreground_target",
    "assign_all_levels",
    "assign_center_cells",
    "levels_for_image",
]

TOP_LEFT = 0
BOTTOM_RIGHT = 1

DEFAULT_IOU_FLOOR = 0.3
SIGMA_FLOOR = 1e-2


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level: stride in pixels and grid size in cells."""

    stride: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.stride <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"invalid level spec {self}")


def levels_for_image(image_w: int, image_h: int, strides=(4, 8)) -> list[LevelSpec]:
    """Level specs covering an image whose sides divide every stride."""
    levels = []
    for s in strides:
        if image_w % s or image_h % s:
            raise ValueError(f"image {image_w}x{image_h} not divisible by stride {s}")
        levels.append(LevelSpec(s, image_h // s, image_w // s))
    return levels


@dataclass(frozen=True)
class CornerOffsetEntry:
    """Sub-pixel offset supervision for one ground-truth corner."""

    corner_type: int  # TOP_LEFT or BOTTOM_RIGHT
    cell_x: int
    cell_y: int
    target_x: float
    target_y: float


@dataclass
class CornerTarget:
    """Corner heatmap + offset supervision for one level.

    ``heatmap`` is (2, H, W) with channel 0 = top-left, 1 = bottom-right;
    positives are exactly 1.0 and ``pos_mask`` marks them.
    """

    heatmap: np.ndarray
    pos_mask: np.ndarray
    offsets: list[CornerOffsetEntry] = field(default_factory=list)


@dataclass
class ForegroundTarget:
    """Category-aware foreground supervision for one level.

    ``label`` is (C, H, W) in {0, 1}; ``weight`` holds 1/S at positive cells
    where S is the positive-cell count of the (smallest colliding) object,
    zero elsewhere.  ``weight_sum`` is the total weight mass used by the
    normalized loss.
    """

    label: np.ndarray
    weight: np.ndarray
    num_positive: int
    weight_sum: float


@dataclass
class LevelTargets:
    level: LevelSpec
    corner: CornerTarget
    foreground: ForegroundTarget


def quantize(point, stride: int) -> tuple[int, int]:
    """Cell (cx, cy) containing a pixel point: floor of each axis over stride."""
    return int(math.floor(point[0] / stride)), int(math.floor(point[1] / stride))


def offset_target(point, stride: int) -> tuple[float, float]:
    """Sub-pixel remainder of a point inside its cell, each axis in [0, 1).

    Reconstructing ``(cell + offset) * stride`` recovers the original pixel
    coordinate (exactly so for power-of-two strides).
    """
    fx = point[0] / stride
    fy = point[1] / stride
    return fx - math.floor(fx), fy - math.floor(fy)


def corner_radius(w_cells: float, h_cells: float, iou_floor: float) -> float:
    """Largest corner displacement radius keeping the shifted box usable.

    Radius r such that perturbing each corner coordinate by up to r cells
    keeps IoU with the original box at least ``iou_floor``.  The binding
    perturbation moves both corners inward, shrinking each side by 2r, which
    gives the quadratic ``4r^2 - 2(w+h)r + (1-f)wh = 0``; we take its smaller
    root.  Scales linearly with box size.
    """
    if not 0.0 < iou_floor <= 1.0:
        raise ValueError(f"iou_floor must be in (0, 1], got {iou_floor}")
    if w_cells <= 0.0 or h_cells <= 0.0:
        return 0.0
    s = w_cells + h_cells
    disc = s * s - 4.0 * (1.0 - iou_floor) * w_cells * h_cells
    # disc >= (w - h)^2 >= 0, so the root is always real.
    return (s - math.sqrt(disc)) / 4.0


def corner_gaussian_sigma(
    box_w: float,
    box_h: float,
    stride: int,
    iou_floor: float = DEFAULT_IOU_FLOOR,
    sigma_floor: float = SIGMA_FLOOR,
) -> float:
    """Penalty Gaussian width (in cells) for a box of the given pixel size.

    Sigma is one third of :func:`corner_radius` computed on the box size in
    cells at this stride, clamped below by ``sigma_floor`` so the Gaussian
    stays well defined for tiny boxes or an IoU floor of 1.
    """
    r = corner_radius(box_w / stride, box_h / stride, iou_floor)
    return max(r / 3.0, sigma_floor)


def _clamped_cell(point, stride: int, level: LevelSpec) -> tuple[int, int]:
    cx, cy = quantize(point, stride)
    return min(max(cx, 0), level.width - 1), min(max(cy, 0), level.height - 1)


def build_corner_target(
    scene: GtScene, level: LevelSpec, iou_floor: float = DEFAULT_IOU_FLOOR
) -> CornerTarget:
    """Corner heatmap, positive mask, and offset entries for one level.

    Each corner contributes a full-grid Gaussian centered on its positive
    cell; non-positive cells keep the largest contribution over all corners
    of their type.  Corners landing on the far image edge clamp into the last
    cell (their offset then reaches 1.0 on that axis).
    """
    heat = np.zeros((2, level.height, level.width), dtype=np.float64)
    pos = np.zeros((2, level.height, level.width), dtype=bool)
    offsets: list[CornerOffsetEntry] = []
    ys, xs = np.mgrid[0 : level.height, 0 : level.width]
    for obj in scene.objects:
        b = obj.box
        sigma = corner_gaussian_sigma(b.width, b.height, level.stride, iou_floor)
        for corner_type, point in ((TOP_LEFT, (b.x1, b.y1)), (BOTTOM_RIGHT, (b.x2, b.y2))):
            cx, cy = _clamped_cell(point, level.stride, level)
            gauss = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
            np.maximum(heat[corner_type], gauss, out=heat[corner_type])
            pos[corner_type, cy, cx] = True
            offsets.append(
                CornerOffsetEntry(
                    corner_type,
                    cx,
                    cy,
                    point[0] / level.stride - cx,
                    point[1] / level.stride - cy,
                )
            )
    heat[pos] = 1.0
    return CornerTarget(heat, pos, offsets)


def build_foreground_target(
    scene: GtScene, level: LevelSpec, num_classes: int
) -> ForegroundTarget:
    """Category-aware foreground map with per-object size-normalized weights.

    A cell is positive for class c when its center pixel lies inside (closed
    bounds) a class-c box.  Its weight is 1/S where S is the positive-cell
    count of the covering object, so each object's weights sum to one; when
    same-class objects overlap a cell, the smallest S wins.  Objects covering
    no cell center at this level are skipped.
    """
    label = np.zeros((num_classes, level.height, level.width), dtype=np.float64)
    weight = np.zeros_like(label)
    centers_x = (np.arange(level.width) + 0.5) * level.stride
    centers_y = (np.arange(level.height) + 0.5) * level.stride
    min_s = np.full((num_classes, level.height, level.width), np.inf)
    for obj in scene.objects:
        b = obj.box
        inside = (
            (centers_x[None, :] >= b.x1)
            & (centers_x[None, :] <= b.x2)
            & (centers_y[:, None] >= b.y1)
            & (centers_y[:, None] <= b.y2)
        )
        s = int(inside.sum())
        if s == 0:
            logger.debug(
                "object %s covers no cell centers at stride %d; skipped",
                b,
                level.stride,
            )
            continue
        label[obj.class_id][inside] = 1.0
        np.minimum(min_s[obj.class_id], np.where(inside, s, np.inf), out=min_s[obj.class_id])
    positive = label > 0
    weight[positive] = 1.0 / min_s[positive]
    return ForegroundTarget(
        label, weight, int(positive.sum()), float(weight.sum())
    )


def assign_all_levels(
    scene: GtScene, levels, iou_floor: float = DEFAULT_IOU_FLOOR
) -> list[LevelTargets]:
    """Build corner and foreground targets for every level of a scene."""
    return [
        LevelTargets(
            level,
            build_corner_target(scene, level, iou_floor),
            build_foreground_target(scene, level, scene.num_classes),
        )
        for level in levels
    ]


@dataclass(frozen=True)
class CellMatch:
    """A positive training cell: grid location plus the matched object index."""

    cell_x: int
    cell_y: int
    object_index: int


def assign_center_cells(scene: GtScene, levels) -> list[list[CellMatch]]:
    """Center-cell detection assignment, one match list per level.

    The cell containing each object's box center is positive at every level.
    When several objects share a cell the smallest box area wins (earliest
    object on exact ties), keeping the assignment deterministic.
    """
    per_level: list[list[CellMatch]] = []
    for level in levels:
        claimed: dict[tuple[int, int], int] = {}
        for idx, obj in enumerate(scene.objects):
            b = obj.box
            center = (0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2))
            cell = _clamped_cell(center, level.stride, level)
            prev = claimed.get(cell)
            if prev is None or scene.objects[prev].box.area > b.area:
                claimed[cell] = idx
        matches = [
            CellMatch(cx, cy, idx) for (cx, cy), idx in sorted(claimed.items())
        ]
        per_level.append(matches)
    return per_level
