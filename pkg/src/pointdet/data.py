"""Synthetic scene generation: shapes on a cluttered, noisy background.

Each class renders a distinct shape (rectangle, ellipse, triangle) in a color
a controlled distance from its local backdrop; the backdrop itself is a
low-frequency color field strewn with thin line segments and dots that belong
to no class. Ground-truth boxes are the analytic bounding boxes of the
shapes, with sub-pixel coordinates. Generation is fully deterministic given
the spec and seed: regenerating a dataset reproduces every byte, which the
manifest hash records.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import BoxXYXY, iou_xyxy
from .scenes import GtObject, GtScene, read_ppm, read_scene_file, write_ppm, write_scene_file

logger = logging.getLogger(__name__)

__all__ = [
    "DatasetSpec",
    "SHAPE_KINDS",
    "render_scene",
    "generate_dataset",
    "load_split",
    "image_to_input",
    "MANIFEST_NAME",
]

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class DatasetSpec:
    """Knobs of the synthetic dataset."""

    image_size: int = 64
    num_classes: int = 3
    train_scenes: int = 1000
    val_scenes: int = 200
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 10.0
    max_size: float = 30.0
    max_overlap: float = 0.25
    placement_retries: int = 40
    noise_sigma: float = 7.0
    contrast_lo: float = 22.0
    contrast_hi: float = 90.0
    max_clutter: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 16 or self.image_size % 8:
            raise ValueError("image_size must be >= 16 and divisible by 8")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 2.0 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("invalid object size range")
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise ValueError("need at least one scene per split")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.contrast_lo <= self.contrast_hi:
            raise ValueError("need 0 < contrast_lo <= contrast_hi")
        if self.max_clutter < 0:
            raise ValueError("max_clutter must be >= 0")


def _smooth_field(rng: np.random.Generator, size: int,
                  lo: float = 25.0, hi: float = 120.0, cells: int = 5) -> np.ndarray:
    """Low-frequency background: bilinear upsampling of a coarse random grid."""
    coarse = rng.uniform(lo, hi, (cells, cells, 3))
    t = np.linspace(0.0, cells - 1.0, size)
    i = np.minimum(t.astype(int), cells - 2)
    f = t - i
    iy, ix = i[:, None], i[None, :]
    fy, fx = f[:, None, None], f[None, :, None]
    return (coarse[iy, ix] * (1 - fy) * (1 - fx)
            + coarse[iy, ix + 1] * (1 - fy) * fx
            + coarse[iy + 1, ix] * fy * (1 - fx)
            + coarse[iy + 1, ix + 1] * fy * fx)


def _paint_color(canvas: np.ndarray, box: BoxXYXY, rng: np.random.Generator,
                 lo: float, hi: float) -> np.ndarray:
    """A color a controlled L2 distance from the backdrop it will cover."""
    y0 = int(np.clip(box.y1, 0, canvas.shape[0] - 1))
    y1 = int(np.clip(box.y2, y0, canvas.shape[0] - 1)) + 1
    x0 = int(np.clip(box.x1, 0, canvas.shape[1] - 1))
    x1 = int(np.clip(box.x2, x0, canvas.shape[1] - 1)) + 1
    base = canvas[y0:y1, x0:x1].mean(axis=(0, 1))
    direction = rng.normal(size=3)
    direction /= max(np.linalg.norm(direction), 1e-9)
    margin = rng.uniform(lo, hi)
    paint = base + direction * margin
    if np.linalg.norm(np.clip(paint, 5.0, 250.0) - base) < lo:
        paint = base - direction * margin
    return np.clip(paint, 5.0, 250.0)


def _shape_inside(kind: str, box: BoxXYXY, xs: np.ndarray, ys: np.ndarray,
                  apex_frac: float) -> np.ndarray:
    """Boolean inside-test of a shape at the given sample coordinates."""
    if kind == "rectangle":
        return (xs >= box.x1) & (xs <= box.x2) & (ys >= box.y1) & (ys <= box.y2)
    if kind == "ellipse":
        cx, cy = 0.5 * (box.x1 + box.x2), 0.5 * (box.y1 + box.y2)
        a, b = 0.5 * box.width, 0.5 * box.height
        return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    if kind == "triangle":
        # Base on the bottom edge, apex on the top edge: the vertex bounding
        # box equals the ground-truth box exactly.
        ax = box.x1 + apex_frac * box.width
        verts = np.array([[box.x1, box.y2], [box.x2, box.y2], [ax, box.y1]])
        mask = np.ones_like(xs, dtype=bool)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            mask &= cross <= 1e-9
        return mask
    raise ValueError(f"unknown shape kind {kind!r}")


def _shape_coverage(kind: str, box: BoxXYXY, size: int, apex_frac: float,
                    samples: int = 4) -> np.ndarray:
    """Fractional pixel coverage of a shape, supersampled ``samples``² per pixel.

    Anti-aliased edges keep the shape's sub-pixel position observable in the
    rendered intensities instead of rounding it away to the pixel grid.
    """
    fine = (np.arange(size * samples) + 0.5) / samples
    xs, ys = np.meshgrid(fine, fine)
    inside = _shape_inside(kind, box, xs, ys, apex_frac)
    return inside.reshape(size, samples, size, samples).mean(axis=(1, 3))


def _segment_coverage(p0, p1, halfwidth: float, size: int,
                      samples: int = 4) -> np.ndarray:
    """Pixel coverage of a round-capped stroke from ``p0`` to ``p1``.

    A zero-length stroke is a dot. Used for clutter that belongs to no class.
    """
    fine = (np.arange(size * samples) + 0.5) / samples
    xs, ys = np.meshgrid(fine, fine)
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t = ((xs - p0[0]) * dx + (ys - p0[1]) * dy) / max(dx * dx + dy * dy, 1e-9)
    t = np.clip(t, 0.0, 1.0)
    inside = (xs - p0[0] - t * dx) ** 2 + (ys - p0[1] - t * dy) ** 2 <= halfwidth**2
    return inside.reshape(size, samples, size, samples).mean(axis=(1, 3))


def render_scene(spec: DatasetSpec, rng: np.random.Generator):
    """Draw one scene; returns ``(GtScene, (H, W, 3) uint8 image)``.

    Clutter strokes are painted before the objects, so an object always
    occludes any clutter underneath it and its corners stay observable.
    Sensor noise is added after compositing, so it covers shapes too.
    """
    size = spec.image_size
    image = _smooth_field(rng, size)
    for _ in range(int(rng.integers(0, spec.max_clutter + 1))):
        x0, y0 = rng.uniform(2.0, size - 2.0, 2)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        length = rng.uniform(0.0, 18.0)
        halfwidth = rng.uniform(0.6, 1.3)
        p1 = (x0 + np.cos(angle) * length, y0 + np.sin(angle) * length)
        pad = halfwidth + 1.0
        hull = BoxXYXY(min(x0, p1[0]) - pad, min(y0, p1[1]) - pad,
                       max(x0, p1[0]) + pad, max(y0, p1[1]) + pad)
        paint = _paint_color(image, hull, rng, spec.contrast_lo, spec.contrast_hi)
        coverage = _segment_coverage((x0, y0), p1, halfwidth, size)[..., None]
        image = image * (1.0 - coverage) + paint * coverage
    objects: list[GtObject] = []
    boxes: list[np.ndarray] = []
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(count):
        placed = False
        for _ in range(spec.placement_retries):
            w = rng.uniform(spec.min_size, spec.max_size)
            h = rng.uniform(spec.min_size, spec.max_size)
            x1 = rng.uniform(0.5, size - w - 0.5)
            y1 = rng.uniform(0.5, size - h - 0.5)
            box = BoxXYXY(x1, y1, x1 + w, y1 + h)
            arr = box.as_array()
            if all(iou_xyxy(arr, other) <= spec.max_overlap for other in boxes):
                placed = True
                break
        if not placed:
            logger.debug("placement failed after %d retries; object skipped",
                         spec.placement_retries)
            continue
        class_id = int(rng.integers(spec.num_classes))
        kind = SHAPE_KINDS[class_id % len(SHAPE_KINDS)]
        apex_frac = float(rng.uniform(0.25, 0.75))
        coverage = _shape_coverage(kind, box, size, apex_frac)[..., None]
        paint = _paint_color(image, box, rng, spec.contrast_lo, spec.contrast_hi)
        image = image * (1.0 - coverage) + paint * coverage
        boxes.append(arr)
        objects.append(GtObject(box, class_id))
    image += rng.normal(0.0, spec.noise_sigma, (size, size, 3))
    image = np.clip(image, 0.0, 255.0).astype(np.uint8)
    scene = GtScene(size, size, spec.num_classes, tuple(objects))
    return scene, image


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_scene_files(spec: DatasetSpec, salt: int, index: int, split_dir: str) -> list:
    """Render scene ``index`` of a split to disk; returns its file records.

    Scene randomness depends only on (spec.seed, salt, index), so scenes can
    be rendered in any order — or in parallel — with identical results.
    """
    rng = np.random.default_rng([spec.seed, salt, index])
    scene, image = render_scene(spec, rng)
    scene_path = Path(split_dir) / f"scene_{index:05d}.txt"
    image_path = Path(split_dir) / f"img_{index:05d}.ppm"
    write_scene_file(scene_path, scene)
    write_ppm(image_path, image)
    return [(path.name, _file_sha256(path)) for path in (scene_path, image_path)]


def generate_dataset(spec: DatasetSpec, out_dir, workers: int = 1) -> dict:
    """Write train/val splits plus a manifest; returns the manifest dict.

    Layout: ``<out_dir>/<split>/scene_NNNNN.txt`` and ``img_NNNNN.ppm``.
    The manifest records the spec, per-file hashes, and an overall dataset
    hash that is identical across reruns with the same spec; with
    ``workers > 1`` scenes render in parallel and merge in index order, so
    the output is byte-identical to a sequential run.
    """
    out = Path(out_dir)
    manifest: dict = {"format_version": 1, "spec": asdict(spec), "splits": {}}
    overall = hashlib.sha256()
    for split, count, salt in (("train", spec.train_scenes, 0), ("val", spec.val_scenes, 1)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                per_scene = list(
                    pool.map(
                        _write_scene_files,
                        itertools.repeat(spec),
                        itertools.repeat(salt),
                        range(count),
                        itertools.repeat(str(split_dir)),
                        chunksize=16,
                    )
                )
        else:
            per_scene = [_write_scene_files(spec, salt, i, str(split_dir)) for i in range(count)]
        files = []
        for records in per_scene:
            for name, digest in records:
                files.append({"path": f"{split}/{name}", "sha256": digest})
                overall.update(name.encode())
                overall.update(bytes.fromhex(digest))
        manifest["splits"][split] = {"count": count, "files": files}
    manifest["dataset_sha256"] = overall.hexdigest()
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_split(dataset_dir, split: str):
    """Load a split as a list of ``(image_id, GtScene, (H, W, 3) uint8)``."""
    split_dir = Path(dataset_dir) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no {split!r} split under {dataset_dir}")
    items = []
    for scene_path in sorted(split_dir.glob("scene_*.txt")):
        stem = scene_path.stem.split("_", 1)[1]
        image_path = split_dir / f"img_{stem}.ppm"
        scene = read_scene_file(scene_path)
        image = read_ppm(image_path)
        items.append((f"{split}_{stem}", scene, image))
    if not items:
        raise FileNotFoundError(f"no scenes found under {split_dir}")
    return items


def image_to_input(image: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) uint8 image to the (3, H, W) float model input."""
    return image.astype(np.float64).transpose(2, 0, 1) / 255.0 - 0.5
