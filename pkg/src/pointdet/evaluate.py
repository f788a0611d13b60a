"""Average-precision evaluation with COCO-style thresholds.

Detections are pooled per class across the dataset, matched greedily in
score order against at most one ground-truth box each (within their own
image), and scored with 101-point interpolated average precision at IoU
thresholds 0.50:0.05:0.95.  Classes absent from the ground truth are left
out of the means.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_xyxy

__all__ = [
    "EvalResult",
    "default_iou_thresholds",
    "match_greedy",
    "interpolated_ap",
    "evaluate_detections",
    "result_to_json",
]

RECALL_GRID = np.linspace(0.0, 1.0, 101)


def default_iou_thresholds() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalResult:
    iou_thresholds: tuple[float, ...]
    ap_per_iou: dict[float, float]
    per_class_ap: dict[int, float]  # averaged over thresholds
    mean_ap: float
    num_images: int
    num_ground_truth: int
    # PR curves at the first threshold, per class, for report rendering.
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def match_greedy(det_boxes, det_scores, gt_boxes, iou_thresh: float):
    """Greedy score-ordered matching of detections to ground truth.

    Returns a boolean TP flag per detection (in the given order, which must
    already be score-descending).  A detection matches the free ground-truth
    box of highest IoU when that IoU reaches the threshold; each box matches
    at most once.
    """
    taken = [False] * len(gt_boxes)
    tp = np.zeros(len(det_boxes), dtype=bool)
    for i, box in enumerate(det_boxes):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou_xyxy(box, gt)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            tp[i] = True
    return tp


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP: mean of max precision at recall >= r."""
    if recall.size == 0:
        return 0.0
    ap = 0.0
    for r in RECALL_GRID:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / RECALL_GRID.size


def evaluate_detections(
    detections_per_image,
    scenes,
    iou_thresholds=None,
) -> EvalResult:
    """Score detections against ground-truth scenes.

    Args:
        detections_per_image: one list of :class:`Detection` per image,
            aligned with ``scenes``.
        scenes: the :class:`GtScene` list; must be non-empty.
        iou_thresholds: IoU thresholds to average over (default 0.50:0.05:0.95).

    Returns an :class:`EvalResult` with per-threshold, per-class, and mean AP.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot evaluate an empty dataset")
    if len(detections_per_image) != len(scenes):
        raise ValueError(
            f"{len(detections_per_image)} detection lists for {len(scenes)} scenes"
        )
    thresholds = tuple(iou_thresholds) if iou_thresholds else default_iou_thresholds()
    num_classes = scenes[0].num_classes

    # Group detections by (image, class), score-sorted within each group.
    # Matching state is per image, so matching each group independently and
    # then pooling the flags in global score order is exactly pooled greedy
    # matching.
    by_img_class: dict[tuple[int, int], list] = {}
    for img_idx, dets in enumerate(detections_per_image):
        for d in dets:
            if not 0 <= d.class_id < num_classes:
                raise ValueError(f"detection class {d.class_id} out of range")
            by_img_class.setdefault((img_idx, d.class_id), []).append(d)
    for group in by_img_class.values():
        group.sort(key=lambda d: -d.score)

    gt_boxes: dict[tuple[int, int], list] = {}
    gt_counts = {c: 0 for c in range(num_classes)}
    for img_idx, scene in enumerate(scenes):
        for obj in scene.objects:
            gt_boxes.setdefault((img_idx, obj.class_id), []).append(obj.box.as_array())
            gt_counts[obj.class_id] += 1

    present = [c for c in range(num_classes) if gt_counts[c] > 0]
    ap_table = np.zeros((len(thresholds), len(present)))
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    for ci, c in enumerate(present):
        for ti, thr in enumerate(thresholds):
            pooled = []  # (score, img_idx, order_in_image, tp)
            for img_idx in range(len(scenes)):
                group = by_img_class.get((img_idx, c), [])
                if not group:
                    continue
                tp = match_greedy(
                    [d.box.as_array() for d in group],
                    [d.score for d in group],
                    gt_boxes.get((img_idx, c), []),
                    thr,
                )
                pooled.extend(
                    (d.score, img_idx, k, bool(t)) for k, (d, t) in enumerate(zip(group, tp))
                )
            pooled.sort(key=lambda row: (-row[0], row[1], row[2]))
            tp = np.array([row[3] for row in pooled], dtype=bool)
            tp_cum = np.cumsum(tp)
            fp_cum = np.cumsum(~tp)
            recall = tp_cum / gt_counts[c]
            precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
            ap_table[ti, ci] = interpolated_ap(recall, precision)
            if ti == 0:
                curves[c] = (recall, precision)

    ap_per_iou = {
        thr: float(ap_table[ti].mean()) if present else 0.0
        for ti, thr in enumerate(thresholds)
    }
    per_class_ap = {c: float(ap_table[:, ci].mean()) for ci, c in enumerate(present)}
    mean_ap = float(ap_table.mean()) if present else 0.0
    return EvalResult(
        thresholds,
        ap_per_iou,
        per_class_ap,
        mean_ap,
        len(scenes),
        sum(gt_counts.values()),
        curves,
    )


def result_to_json(result: EvalResult) -> str:
    """Deterministic JSON rendering of an evaluation result."""
    doc = {
        "iou_thresholds": list(result.iou_thresholds),
        "ap_per_iou": {f"{t:.2f}": result.ap_per_iou[t] for t in result.iou_thresholds},
        "per_class_ap": {str(c): v for c, v in sorted(result.per_class_ap.items())},
        "mean_ap": result.mean_ap,
        "num_images": result.num_images,
        "num_ground_truth": result.num_ground_truth,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
