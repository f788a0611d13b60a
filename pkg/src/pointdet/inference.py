"""Detection decoding, joint corner refinement, and NMS.

The regression head proposes boxes; the corner-verification head proposes
scored sub-pixel corner candidates.  Joint refinement snaps each box corner
independently to the best-scoring candidate within a stride-relative radius,
then reorders coordinates so the box stays valid.  Class-wise greedy NMS
finishes the pipeline.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BoxXYXY, ConversionMode, iou_xyxy, points_to_box
from .targets import BOTTOM_RIGHT, TOP_LEFT, LevelSpec

__all__ = [
    "CornerCandidate",
    "Detection",
    "RefineConfig",
    "InferenceConfig",
    "decode_candidates",
    "refine_corner",
    "joint_refine",
    "nms",
    "run_inference",
    "detections_to_json",
]


@dataclass(frozen=True)
class CornerCandidate:
    """A scored sub-pixel corner proposal decoded from a heatmap cell."""

    corner_type: int  # TOP_LEFT or BOTTOM_RIGHT
    x: float
    y: float
    score: float
    stride: int


@dataclass(frozen=True)
class Detection:
    box: BoxXYXY
    class_id: int
    score: float
    stride: int = 0
    refined_tl: bool = False
    refined_br: bool = False


@dataclass(frozen=True)
class RefineConfig:
    """Joint-refinement knobs.

    ``radius`` is measured in cells of the candidate's own level: a corner
    may snap to a candidate q when ``|q - p| / stride(q) <= radius``.  With
    ``pool_levels`` candidates from all pyramid levels compete; otherwise
    only the detection's producing level is searched.
    """

    radius: float = 1.0
    score_floor: float = 0.1
    max_per_type_per_level: int = 100
    pool_levels: bool = True


@dataclass(frozen=True)
class InferenceConfig:
    score_thresh: float = 0.05
    max_per_level: int = 100
    max_detections: int = 100
    nms_iou: float = 0.6
    joint_inference: bool = True
    refine: RefineConfig = field(default_factory=RefineConfig)
    conversion: ConversionMode = ConversionMode.EXPLICIT_CORNERS
    subset_size: int = 4
    moment_multiplier: float = 2.0


def decode_candidates(
    corner_heat: np.ndarray,
    corner_off: np.ndarray,
    level: LevelSpec,
    cfg: RefineConfig = RefineConfig(),
) -> list[CornerCandidate]:
    """Decode scored corner candidates from one level's verification maps.

    Cells scoring at least ``cfg.score_floor`` survive; the best
    ``cfg.max_per_type_per_level`` per corner type are emitted at sub-pixel
    position ``(cell + offset) * stride``.
    """
    heat = np.asarray(corner_heat, dtype=np.float64)
    off = np.asarray(corner_off, dtype=np.float64)
    if heat.shape != (2, level.height, level.width) or off.shape[0] != 4:
        raise ValueError(f"bad corner map shapes {heat.shape}, {off.shape}")
    out: list[CornerCandidate] = []
    for corner_type in (TOP_LEFT, BOTTOM_RIGHT):
        scores = heat[corner_type]
        keep_y, keep_x = np.nonzero(scores >= cfg.score_floor)
        if keep_y.size == 0:
            continue
        vals = scores[keep_y, keep_x]
        # Deterministic top-k: score descending, then row-major position.
        order = np.lexsort((keep_x, keep_y, -vals))[: cfg.max_per_type_per_level]
        for idx in order:
            cy, cx = int(keep_y[idx]), int(keep_x[idx])
            ox = off[2 * corner_type, cy, cx]
            oy = off[2 * corner_type + 1, cy, cx]
            out.append(
                CornerCandidate(
                    corner_type,
                    (cx + ox) * level.stride,
                    (cy + oy) * level.stride,
                    float(vals[idx]),
                    level.stride,
                )
            )
    return out


def refine_corner(
    corner_xy: tuple[float, float],
    candidates: list[CornerCandidate],
    cfg: RefineConfig = RefineConfig(),
):
    """Snap one corner to the best in-range candidate, if any.

    Returns ``(new_xy, winner)`` where ``winner`` is the chosen candidate or
    None when nothing lies within ``cfg.radius`` (measured in cells of each
    candidate's own stride).  Ties on score break deterministically toward
    smaller (x, y, stride).
    """
    px, py = corner_xy
    best = None
    for cand in candidates:
        dist = math.hypot(cand.x - px, cand.y - py) / cand.stride
        if dist > cfg.radius:
            continue
        if best is None or (-cand.score, cand.x, cand.y, cand.stride) < (
            -best.score,
            best.x,
            best.y,
            best.stride,
        ):
            best = cand
    if best is None:
        return (px, py), None
    return (best.x, best.y), best


def joint_refine(
    det: Detection,
    candidates: list[CornerCandidate],
    cfg: RefineConfig = RefineConfig(),
) -> tuple[Detection, dict]:
    """Refine a detection's two corners independently against candidates.

    Each corner only considers candidates of its own type.  After snapping,
    coordinates are reordered per axis so the box stays valid.  Also returns
    a log dict with per-corner before/after positions and winner scores.
    """
    tl_cands = [c for c in candidates if c.corner_type == TOP_LEFT]
    br_cands = [c for c in candidates if c.corner_type == BOTTOM_RIGHT]
    if not cfg.pool_levels:
        tl_cands = [c for c in tl_cands if c.stride == det.stride]
        br_cands = [c for c in br_cands if c.stride == det.stride]
    (tlx, tly), tl_win = refine_corner((det.box.x1, det.box.y1), tl_cands, cfg)
    (brx, bry), br_win = refine_corner((det.box.x2, det.box.y2), br_cands, cfg)
    box = BoxXYXY.spanning((tlx, tly), (brx, bry))
    refined = replace(
        det, box=box, refined_tl=tl_win is not None, refined_br=br_win is not None
    )
    log = {
        "top_left": {
            "before": [det.box.x1, det.box.y1],
            "after": [tlx, tly],
            "candidate_score": None if tl_win is None else tl_win.score,
        },
        "bottom_right": {
            "before": [det.box.x2, det.box.y2],
            "after": [brx, bry],
            "candidate_score": None if br_win is None else br_win.score,
        },
    }
    return refined, log


def nms(detections: list[Detection], iou_thresh: float = 0.6) -> list[Detection]:
    """Class-wise greedy NMS.

    Detections are visited in descending score (ties break on class id then
    box coordinates, keeping the result deterministic); one is removed iff it
    overlaps an already-kept same-class detection with IoU strictly above the
    threshold.  The kept list comes back sorted by descending score.
    """
    order = sorted(
        detections,
        key=lambda d: (-d.score, d.class_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2),
    )
    kept: list[Detection] = []
    for det in order:
        suppressed = False
        for keep in kept:
            if keep.class_id != det.class_id:
                continue
            if iou_xyxy(keep.box, det.box) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(det)
    return kept


def run_inference(level_outputs, cfg: InferenceConfig = InferenceConfig()) -> list[Detection]:
    """Full decode: boxes from points, optional corner snapping, then NMS.

    ``level_outputs`` is a list of :class:`pointdet.model.LevelOutput`.  With
    joint inference disabled (or no corner maps present) the corner-snapping
    stage is skipped entirely, leaving the pure regression pipeline.
    """
    detections: list[Detection] = []
    candidates: list[CornerCandidate] = []
    for out in level_outputs:
        level = out.level
        scores = np.asarray(out.cls_scores, dtype=np.float64)
        ncls = scores.shape[0]
        flat = scores.reshape(ncls, -1)
        keep_c, keep_pos = np.nonzero(flat >= cfg.score_thresh)
        if keep_c.size:
            vals = flat[keep_c, keep_pos]
            order = np.lexsort((keep_pos, keep_c, -vals))[: cfg.max_per_level]
            for idx in order:
                c = int(keep_c[idx])
                cy, cx = divmod(int(keep_pos[idx]), level.width)
                pts = out.points[:, cy, cx].reshape(-1, 2) * level.stride
                box = points_to_box(
                    pts,
                    cfg.conversion,
                    subset_size=cfg.subset_size,
                    moment_multiplier=cfg.moment_multiplier,
                )
                detections.append(Detection(box, c, float(vals[idx]), level.stride))
        if cfg.joint_inference and out.corner_heat is not None:
            candidates.extend(
                decode_candidates(out.corner_heat, out.corner_off, level, cfg.refine)
            )
    if cfg.joint_inference and candidates:
        detections = [joint_refine(d, candidates, cfg.refine)[0] for d in detections]
    kept = nms(detections, cfg.nms_iou)
    return kept[: cfg.max_detections]


def detections_to_json(image_id: str, detections: list[Detection]) -> str:
    """Serialize detections for one image, ordered by score then class."""
    ordered = sorted(detections, key=lambda d: (-d.score, d.class_id))
    doc = {
        "image_id": image_id,
        "detections": [
            {
                "class": d.class_id,
                "score": d.score,
                "box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2],
            }
            for d in ordered
        ],
    }
    return json.dumps(doc, sort_keys=True)
