"""Figure rendering for training and evaluation artifacts.

All functions write PNG files via the Agg backend; nothing here opens a
window.  Overlay color convention: red boxes are raw detections, green
boxes are detections whose corners were moved by joint refinement, thin
white boxes are ground truth.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import EvalResult
from .inference import Detection
from .scenes import GtScene

__all__ = [
    "plot_loss_curves",
    "plot_ap_bars",
    "plot_pr_curves",
    "plot_detections",
]


def plot_loss_curves(log_path, out_path) -> Path:
    """Render per-component loss curves from a JSONL training log.

    Args:
        log_path: loss_log.jsonl written by the trainer, one object per
            iteration with at least ``iteration`` and ``total`` keys.
        out_path: destination PNG.
    """
    rows = []
    with open(log_path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"empty loss log {log_path}")
    iters = [r["iteration"] for r in rows]
    skip = {"iteration", "lr", "epoch"}
    keys = [k for k in rows[0] if k not in skip]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in keys:
        ys = np.array([r.get(key, np.nan) for r in rows], dtype=float)
        lw = 1.8 if key == "total" else 0.9
        ax.plot(iters, ys, label=key, linewidth=lw)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_ap_bars(result: EvalResult, out_path) -> Path:
    """Bar chart of AP at each IoU threshold, with the mean as a line."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    xs = np.arange(len(result.iou_thresholds))
    vals = [result.ap_per_iou[t] for t in result.iou_thresholds]
    ax.bar(xs, vals, color="#4878d0")
    ax.axhline(result.mean_ap, color="#d65f5f", linestyle="--",
               label=f"mean AP = {result.mean_ap:.3f}")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{t:.2f}" for t in result.iou_thresholds], fontsize=8)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_pr_curves(result: EvalResult, out_path) -> Path:
    """Precision-recall curves per class at the first IoU threshold."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    if result.curves:
        for class_id in sorted(result.curves):
            recall, precision = result.curves[class_id]
            ax.plot(recall, precision, label=f"class {class_id}")
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no detections", ha="center", va="center")
    thr = result.iou_thresholds[0] if result.iou_thresholds else 0.5
    ax.set_title(f"PR at IoU {thr:.2f}", fontsize=10)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _draw_box(ax, box, color, lw=1.5, score=None):
    w = box.x2 - box.x1
    h = box.y2 - box.y1
    rect = plt.Rectangle((box.x1, box.y1), w, h, fill=False, edgecolor=color,
                         linewidth=lw)
    ax.add_patch(rect)
    if score is not None:
        ax.text(box.x1, max(box.y1 - 1.0, 0.0), f"{score:.2f}", color=color,
                fontsize=7, va="bottom")


def plot_detections(
    image: np.ndarray,
    detections: list[Detection],
    out_path,
    scene: GtScene | None = None,
    max_boxes: int = 20,
) -> Path:
    """Overlay detections on an image.

    Red = detection kept as decoded, green = at least one corner replaced
    by joint refinement, white (thin) = ground truth.
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(image)
    if scene is not None:
        for obj in scene.objects:
            _draw_box(ax, obj.box, "white", lw=0.8)
    for det in detections[:max_boxes]:
        refined = det.refined_tl or det.refined_br
        _draw_box(ax, det.box, "#2ca02c" if refined else "#d62728",
                  lw=1.5, score=det.score)
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
