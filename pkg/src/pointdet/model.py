"""The toy two-level detector.

A small strided conv backbone feeds a shared head that regresses a point set
per cell in two stages (offsets from the cell, then offsets from features
sampled at the stage-1 points).  Verification branches tap the localization
tower: a corner branch (corner pooling + 1x1 conv) predicts corner heatmaps
with sub-pixel offsets, and a foreground branch predicts category-aware
occupancy.  When fusion is on, the verification outputs are embedded through
bias-free 1x1 convs (behind a gradient stop) and added back onto the tower
feature before the final classification/regression projections.

Parameters are initialized from a name-keyed RNG, so two models built with
the same seed share identical weights for every branch they have in common
regardless of which optional branches exist.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .geometry import ConversionMode
from .scenes import GtScene
from .targets import (
    CornerTarget,
    ForegroundTarget,
    LevelSpec,
    assign_all_levels,
    assign_center_cells,
    levels_for_image,
)

logger = logging.getLogger(__name__)

__all__ = [
    "HeadConfig",
    "ABLATION_PRESETS",
    "LevelForward",
    "LevelOutput",
    "Model",
    "LossBreakdown",
]


@dataclass(frozen=True)
class HeadConfig:
    """Architecture and training switches of the detector head."""

    num_classes: int = 3
    num_points: int = 9
    channels: int = 24
    conversion: ConversionMode = ConversionMode.EXPLICIT_CORNERS
    subset_size: int = 4
    corner_head: bool = True
    fg_head: bool = True
    fusion: bool = True
    joint_inference: bool = True
    prior_extent: float = 1.5  # half-size (cells) of the warm-start box prior
    regression_mode: L.RegressionMode = L.RegressionMode.GIOU
    stage1_weight: float = 0.5
    stage2_weight: float = 1.0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    focal: L.FocalParams = field(default_factory=L.FocalParams)
    iou_floor: float = 0.3

    def __post_init__(self) -> None:
        if self.num_points < 2:
            raise ValueError("num_points must be at least 2")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if self.fusion and not (self.corner_head or self.fg_head):
            raise ValueError("fusion requires at least one verification head")
        if self.joint_inference and not self.corner_head:
            raise ValueError("joint inference requires the corner head")


# Ablation presets, ordered from plain regression to the full pipeline.
ABLATION_PRESETS: dict[str, dict] = {
    "baseline": dict(corner_head=False, fg_head=False, fusion=False, joint_inference=False),
    "multitask": dict(corner_head=True, fg_head=True, fusion=False, joint_inference=False),
    "fusion": dict(corner_head=True, fg_head=True, fusion=True, joint_inference=False),
    "full": dict(corner_head=True, fg_head=True, fusion=True, joint_inference=True),
}


def apply_ablation(cfg: HeadConfig, name: str) -> HeadConfig:
    try:
        return replace(cfg, **ABLATION_PRESETS[name])
    except KeyError:
        raise ValueError(
            f"unknown ablation {name!r}; expected one of {sorted(ABLATION_PRESETS)}"
        ) from None


@dataclass
class LevelForward:
    """Graph nodes produced by the head at one level."""

    level: LevelSpec
    cls_scores: Tensor
    points_init: Tensor  # (2n, H, W), cell units
    points_refine: Tensor
    corner_heat: Tensor | None = None  # (2, H, W)
    corner_off: Tensor | None = None  # (4, H, W): [tl_x, tl_y, br_x, br_y]
    fg_scores: Tensor | None = None  # (C, H, W)


@dataclass
class LevelOutput:
    """Plain-array view of a level's forward pass, for inference/eval."""

    level: LevelSpec
    cls_scores: np.ndarray
    points: np.ndarray  # refined stage-2 points, cell units
    corner_heat: np.ndarray | None = None
    corner_off: np.ndarray | None = None
    fg_scores: np.ndarray | None = None


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def point_priors(num_points: int, extent: float) -> np.ndarray:
    """Fixed per-point offsets (cells) seeding a small identity box.

    Points 0 and 1 start at the top-left / bottom-right corners of a box of
    half-size ``extent``; the remaining points spread on a ring inside it.
    """
    priors = np.zeros((num_points, 2), dtype=np.float64)
    priors[0] = (-extent, -extent)
    priors[1] = (extent, extent)
    rest = num_points - 2
    for i in range(rest):
        angle = 2.0 * np.pi * i / rest
        priors[2 + i] = (extent * 0.7 * np.cos(angle), extent * 0.7 * np.sin(angle))
    return priors


def _base_grid(level: LevelSpec, num_points: int) -> np.ndarray:
    """Cell-center reference positions replicated per point, (2n, H, W)."""
    ys, xs = np.mgrid[0 : level.height, 0 : level.width].astype(np.float64)
    grid = np.empty((2 * num_points, level.height, level.width), dtype=np.float64)
    grid[0::2] = xs + 0.5
    grid[1::2] = ys + 0.5
    return grid


class Model:
    """Detector parameters plus forward/loss assembly."""

    def __init__(self, cfg: HeadConfig, seed: int = 0, strides=(4, 8)):
        self.cfg = cfg
        self.strides = tuple(strides)
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._build_params()

    # ------------------------------------------------------------------ init
    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, _name_key(name)])

    def _conv3x3_param(self, name: str, cin: int, cout: int) -> None:
        std = np.sqrt(2.0 / (cin * 9))
        self.params[f"{name}.w"] = ad.parameter(
            self._rng(f"{name}.w").normal(0.0, std, (cout, cin, 3, 3)), f"{name}.w"
        )
        self.params[f"{name}.b"] = ad.parameter(np.zeros(cout), f"{name}.b")

    def _conv1x1_param(self, name: str, cin: int, cout: int, std: float | None = None,
                       bias: float | np.ndarray = 0.0) -> None:
        std = np.sqrt(2.0 / cin) if std is None else std
        self.params[f"{name}.w"] = ad.parameter(
            self._rng(f"{name}.w").normal(0.0, std, (cout, cin)), f"{name}.w"
        )
        self.params[f"{name}.b"] = ad.parameter(
            np.broadcast_to(np.asarray(bias, dtype=np.float64), (cout,)).copy(), f"{name}.b"
        )

    def _build_params(self) -> None:
        cfg = self.cfg
        c, ncls, n = cfg.channels, cfg.num_classes, cfg.num_points
        self._conv3x3_param("backbone.stem", 3, c)
        self._conv3x3_param("backbone.down1", c, c)
        self._conv3x3_param("backbone.mix", c, c)
        self._conv3x3_param("backbone.down2", c, c)
        for i in range(3):
            self._conv3x3_param(f"head.tower{i}", c, c)
        if cfg.corner_head or cfg.fg_head:
            self._conv3x3_param("ver.tap", c, c)
        if cfg.corner_head:
            # 3 channels per corner type: heatmap score + (x, y) offset.  The
            # heat channel starts at prior 0.1; offsets are linear outputs
            # biased to 0.5, the mean of their [0, 1) targets.
            corner_bias = np.array([-np.log(9.0), 0.5, 0.5])
            self._conv1x1_param("ver.tl", c, 3, std=0.01, bias=corner_bias)
            self._conv1x1_param("ver.br", c, 3, std=0.01, bias=corner_bias)
        if cfg.fg_head:
            self._conv1x1_param("ver.fg", c, ncls, std=0.01, bias=-np.log(99.0))
        if cfg.fusion:
            # Zero-initialized and bias-free: fusion starts as the identity
            # and stays a no-op for all-zero verification outputs.
            if cfg.corner_head:
                self.params["fuse.corner.w"] = ad.parameter(np.zeros((c, 6)), "fuse.corner.w")
            if cfg.fg_head:
                self.params["fuse.fg.w"] = ad.parameter(np.zeros((c, ncls)), "fuse.fg.w")
        self._conv1x1_param("det.cls", c, ncls, std=0.01, bias=-np.log(99.0))
        prior = point_priors(n, cfg.prior_extent).reshape(-1)
        self._conv1x1_param("det.reg1", c, 2 * n, std=0.0, bias=prior)
        self._conv1x1_param("det.reg2", n * c, 2 * n, std=0.0, bias=0.0)
        if cfg.conversion is ConversionMode.MOMENT:
            self.params["det.moment"] = ad.parameter(np.float64(2.0), "det.moment")

    # ----------------------------------------------------------------- state
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {value.shape} != {p.data.shape}"
                )
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @property
    def moment_multiplier(self) -> float:
        p = self.params.get("det.moment")
        return float(p.data) if p is not None else 2.0

    # --------------------------------------------------------------- forward
    def _conv3(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return ad.conv3x3(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride)

    def _conv1(self, x: Tensor, name: str) -> Tensor:
        return ad.conv1x1(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def forward(self, image: np.ndarray) -> list[LevelForward]:
        """Run the detector on a (3, H, W) float image in [0, 1]-ish range."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {img.shape}")
        levels = levels_for_image(img.shape[2], img.shape[1], self.strides)
        x = ad.constant(img, "image")
        s = ad.relu(self._conv3(x, "backbone.stem", stride=2))
        t4 = ad.relu(self._conv3(s, "backbone.down1", stride=2))
        f4 = ad.relu(self._conv3(t4, "backbone.mix"))
        f8 = ad.relu(self._conv3(f4, "backbone.down2", stride=2))
        return [
            self._forward_level(feat, level)
            for feat, level in zip((f4, f8), levels)
        ]

    def _forward_level(self, feat: Tensor, level: LevelSpec) -> LevelForward:
        cfg = self.cfg
        t = feat
        for i in range(3):
            t = ad.relu(self._conv3(t, f"head.tower{i}"))

        corner_heat = corner_off = fg_scores = None
        corner_maps = None
        if cfg.corner_head or cfg.fg_head:
            v = ad.relu(self._conv3(t, "ver.tap"))
            if cfg.corner_head:
                # Sigmoid only the heat channel; offsets are regressed raw so
                # their smooth-L1 gradient is not squashed by the sigmoid.
                tl = self._conv1(ad.corner_pool(v, "top_left"), "ver.tl")
                br = self._conv1(ad.corner_pool(v, "bottom_right"), "ver.br")
                tl_heat = ad.sigmoid(ad.slice_channels(tl, 0, 1))
                br_heat = ad.sigmoid(ad.slice_channels(br, 0, 1))
                tl_off = ad.slice_channels(tl, 1, 3)
                br_off = ad.slice_channels(br, 1, 3)
                corner_maps = ad.concat_channels([tl_heat, tl_off, br_heat, br_off])
                corner_heat = ad.concat_channels([tl_heat, br_heat])
                corner_off = ad.concat_channels([tl_off, br_off])
            if cfg.fg_head:
                fg_scores = ad.sigmoid(self._conv1(v, "ver.fg"))

        fused = t
        if cfg.fusion:
            if corner_maps is not None:
                emb = ad.conv1x1(ad.stop_gradient(corner_maps), self.params["fuse.corner.w"])
                fused = ad.add(fused, emb)
            if fg_scores is not None:
                emb = ad.conv1x1(ad.stop_gradient(fg_scores), self.params["fuse.fg.w"])
                fused = ad.add(fused, emb)

        cls_scores = ad.sigmoid(self._conv1(fused, "det.cls"))
        off1 = self._conv1(fused, "det.reg1")
        pts1 = ad.add(ad.constant(_base_grid(level, cfg.num_points)), off1)
        sampled = ad.sample_point_map(fused, pts1)
        off2 = self._conv1(sampled, "det.reg2")
        pts2 = ad.add(pts1, off2)
        return LevelForward(level, cls_scores, pts1, pts2, corner_heat, corner_off, fg_scores)

    def predict(self, image: np.ndarray) -> list[LevelOutput]:
        """Forward pass returning plain arrays for inference."""
        return [
            LevelOutput(
                f.level,
                f.cls_scores.data,
                f.points_refine.data,
                None if f.corner_heat is None else f.corner_heat.data,
                None if f.corner_off is None else f.corner_off.data,
                None if f.fg_scores is None else f.fg_scores.data,
            )
            for f in self.forward(image)
        ]


# ---------------------------------------------------------------------------
# Loss nodes: scalar graph nodes wrapping the analytic-gradient losses.
# ---------------------------------------------------------------------------


def _scalar_node(value: float, parents, op: str, back) -> Tensor:
    node = Tensor(np.float64(value), parents=parents, op=op)
    node._backward = back
    return node


def focal_loss_node(pred: Tensor, target: np.ndarray, normalizer: float,
                    alpha: float, gamma: float) -> Tensor:
    out = L.focal_loss(pred.data, target, normalizer, alpha, gamma)

    def back():
        if pred.requires_grad:
            pred.accumulate(float(node.grad) * out.grad)

    node = _scalar_node(out.value, (pred,), "focal_loss", back)
    return node


def corner_heatmap_loss_node(pred: Tensor, target: CornerTarget, num_objects: int,
                             params: L.FocalParams) -> Tensor:
    out = L.corner_heatmap_loss(pred.data, target, num_objects, params)

    def back():
        if pred.requires_grad:
            pred.accumulate(float(node.grad) * out.grad)

    node = _scalar_node(out.value, (pred,), "corner_heatmap_loss", back)
    return node


def corner_offset_loss_node(pred: Tensor, target: CornerTarget) -> Tensor:
    """Smooth-L1 on predicted sub-pixel offsets at supervised corner cells.

    ``pred`` is the (4, H, W) offset map laid out [tl_x, tl_y, br_x, br_y].
    """
    entries = target.offsets
    if not entries:
        return _scalar_node(0.0, (pred,), "corner_offset_loss", lambda: None)
    rows = np.array(
        [pred.data[2 * e.corner_type : 2 * e.corner_type + 2, e.cell_y, e.cell_x] for e in entries]
    )
    tgt = np.array([[e.target_x, e.target_y] for e in entries])
    out = L.offset_loss(rows, tgt)

    def back():
        if not pred.requires_grad:
            return
        g = np.zeros_like(pred.data)
        scale = float(node.grad)
        for k, e in enumerate(entries):
            g[2 * e.corner_type, e.cell_y, e.cell_x] += scale * out.grad[k, 0]
            g[2 * e.corner_type + 1, e.cell_y, e.cell_x] += scale * out.grad[k, 1]
        pred.accumulate(g)

    node = _scalar_node(out.value, (pred,), "corner_offset_loss", back)
    return node


def foreground_loss_node(pred: Tensor, target: ForegroundTarget,
                         params: L.FocalParams) -> Tensor:
    out = L.normalized_focal_loss(pred.data, target, params)

    def back():
        if pred.requires_grad:
            pred.accumulate(float(node.grad) * out.grad)

    node = _scalar_node(out.value, (pred,), "foreground_loss", back)
    return node


def points_regression_loss_node(
    points: list[Tensor],
    matches_per_level,
    scene: GtScene,
    levels,
    mode: L.RegressionMode,
    conversion: ConversionMode,
    subset_size: int,
    multiplier: Tensor | None,
) -> Tensor:
    """Box regression over all matched cells of all levels, mean per pair."""
    gathered = []
    gts = []
    index = []  # (level_idx, cell_y, cell_x, stride)
    for li, (pts_t, matches, level) in enumerate(zip(points, matches_per_level, levels)):
        for m in matches:
            pset = pts_t.data[:, m.cell_y, m.cell_x].reshape(-1, 2) * level.stride
            gathered.append(pset)
            gts.append(scene.objects[m.object_index].box.as_array())
            index.append((li, m.cell_y, m.cell_x, level.stride))
    parents = tuple(points) + ((multiplier,) if multiplier is not None else ())
    if not gathered:
        return _scalar_node(0.0, parents, "points_regression_loss", lambda: None)
    mult_value = float(multiplier.data) if multiplier is not None else 2.0
    out, dmult = L.points_regression_loss(
        np.stack(gathered),
        np.stack(gts),
        mode,
        conversion,
        subset_size=subset_size,
        moment_multiplier=mult_value,
    )

    def back():
        scale = float(node.grad)
        grads = [np.zeros_like(t.data) for t in points]
        for k, (li, cy, cx, stride) in enumerate(index):
            grads[li][:, cy, cx] += scale * out.grad[k].reshape(-1) * stride
        for t, g in zip(points, grads):
            if t.requires_grad:
                t.accumulate(g)
        if multiplier is not None and multiplier.requires_grad:
            multiplier.accumulate(np.float64(scale * dmult))

    node = _scalar_node(out.value, parents, "points_regression_loss", back)
    return node


@dataclass
class LossBreakdown:
    """Scalar graph node for the total loss plus per-component values."""

    total: Tensor
    components: dict


def compute_losses(model: Model, forwards: list[LevelForward], scene: GtScene) -> LossBreakdown:
    """Assemble the multi-task training loss graph for one image.

    Total = classification focal + weighted two-stage box regression
    + lambda_corner * (heatmap + offset) + lambda_fg * foreground.
    Verification terms average over pyramid levels; regression and
    classification pool their positives across levels.
    """
    cfg = model.cfg
    levels = [f.level for f in forwards]
    matches = assign_center_cells(scene, levels)
    total_pos = sum(len(m) for m in matches)
    num_levels = len(forwards)

    cls_nodes = []
    for fwd, level_matches in zip(forwards, matches):
        target = np.zeros(fwd.cls_scores.shape, dtype=np.float64)
        for m in level_matches:
            target[scene.objects[m.object_index].class_id, m.cell_y, m.cell_x] = 1.0
        cls_nodes.append(
            focal_loss_node(
                fwd.cls_scores, target, max(total_pos, 1), cfg.focal.fg_alpha, cfg.focal.fg_gamma
            )
        )
    cls = _sum_nodes(cls_nodes)

    multiplier = model.params.get("det.moment")
    reg_kwargs = dict(
        matches_per_level=matches,
        scene=scene,
        levels=levels,
        mode=cfg.regression_mode,
        conversion=cfg.conversion,
        subset_size=cfg.subset_size,
        multiplier=multiplier,
    )
    reg1 = points_regression_loss_node([f.points_init for f in forwards], **reg_kwargs)
    reg2 = points_regression_loss_node([f.points_refine for f in forwards], **reg_kwargs)

    total = _sum_nodes(
        [cls, ad.scale(reg1, cfg.stage1_weight), ad.scale(reg2, cfg.stage2_weight)]
    )
    components = {
        "classification": float(cls.data),
        "regression_init": float(reg1.data),
        "regression_refine": float(reg2.data),
    }

    needs_targets = cfg.corner_head or cfg.fg_head
    targets = assign_all_levels(scene, levels, cfg.iou_floor) if needs_targets else None

    if cfg.corner_head:
        heat_nodes = [
            corner_heatmap_loss_node(f.corner_heat, t.corner, len(scene.objects), cfg.focal)
            for f, t in zip(forwards, targets)
        ]
        off_nodes = [
            corner_offset_loss_node(f.corner_off, t.corner) for f, t in zip(forwards, targets)
        ]
        corner = ad.scale(_sum_nodes(heat_nodes + off_nodes), 1.0 / num_levels)
        components["corner"] = float(corner.data)
        total = ad.add(total, ad.scale(corner, cfg.loss_weights.corner))
    if cfg.fg_head:
        fg_nodes = [
            foreground_loss_node(f.fg_scores, t.foreground, cfg.focal)
            for f, t in zip(forwards, targets)
        ]
        fg = ad.scale(_sum_nodes(fg_nodes), 1.0 / num_levels)
        components["foreground"] = float(fg.data)
        total = ad.add(total, ad.scale(fg, cfg.loss_weights.foreground))

    components["total"] = float(total.data)
    return LossBreakdown(total, components)


def _sum_nodes(nodes: list[Tensor]) -> Tensor:
    acc = nodes[0]
    for node in nodes[1:]:
        acc = ad.add(acc, node)
    return acc
