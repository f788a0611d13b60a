"""Ground-truth scenes and their on-disk formats.

A scene file is line-oriented text: a header ``image W H C`` followed by one
``class x1 y1 x2 y2`` line per object.  Floats are written with ``repr`` so
parsing reproduces the written values bit for bit.  Images are stored as
binary PPM (P6, maxval 255).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoxXYXY

__all__ = [
    "GtObject",
    "GtScene",
    "SceneFormatError",
    "parse_scene",
    "format_scene",
    "read_scene_file",
    "write_scene_file",
    "read_ppm",
    "write_ppm",
]


class SceneFormatError(ValueError):
    """Malformed scene file; message carries the offending line number."""


@dataclass(frozen=True)
class GtObject:
    box: BoxXYXY
    class_id: int


@dataclass(frozen=True)
class GtScene:
    """An annotated image: size, class count, and ground-truth objects.

    Every box must lie inside the image (closed bounds) and every class id
    in ``[0, num_classes)``.
    """

    image_w: int
    image_h: int
    num_classes: int
    objects: tuple[GtObject, ...]

    def __post_init__(self) -> None:
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError(f"invalid image size {self.image_w}x{self.image_h}")
        if self.num_classes <= 0:
            raise ValueError(f"invalid class count {self.num_classes}")
        for obj in self.objects:
            b = obj.box
            if not (0.0 <= b.x1 and b.x2 <= self.image_w and 0.0 <= b.y1 and b.y2 <= self.image_h):
                raise ValueError(f"box {b} outside {self.image_w}x{self.image_h} image")
            if not 0 <= obj.class_id < self.num_classes:
                raise ValueError(
                    f"class id {obj.class_id} outside [0, {self.num_classes})"
                )


def _parse_float(token: str, lineno: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise SceneFormatError(f"line {lineno}: {what} is not a number: {token!r}") from None
    if not np.isfinite(value):
        raise SceneFormatError(f"line {lineno}: {what} is not finite: {token!r}")
    return value


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise SceneFormatError(f"line {lineno}: {what} is not an integer: {token!r}") from None


def parse_scene(text: str) -> GtScene:
    """Parse scene-file text; raises :class:`SceneFormatError` with a line number."""
    lines = text.splitlines()
    if not lines:
        raise SceneFormatError("line 1: empty scene file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "image":
        raise SceneFormatError("line 1: expected header 'image W H C'")
    w = _parse_int(header[1], 1, "image width")
    h = _parse_int(header[2], 1, "image height")
    c = _parse_int(header[3], 1, "class count")
    objects = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise SceneFormatError(
                f"line {lineno}: expected 'class x1 y1 x2 y2', got {len(tokens)} tokens"
            )
        class_id = _parse_int(tokens[0], lineno, "class id")
        coords = [
            _parse_float(tok, lineno, name)
            for tok, name in zip(tokens[1:], ("x1", "y1", "x2", "y2"))
        ]
        if coords[0] > coords[2] or coords[1] > coords[3]:
            raise SceneFormatError(f"line {lineno}: inverted box {coords}")
        if not 0 <= class_id < c:
            raise SceneFormatError(f"line {lineno}: class id {class_id} outside [0, {c})")
        if not (0.0 <= coords[0] and coords[2] <= w and 0.0 <= coords[1] and coords[3] <= h):
            raise SceneFormatError(f"line {lineno}: box {coords} outside {w}x{h} image")
        objects.append(GtObject(BoxXYXY(*coords), class_id))
    return GtScene(w, h, c, tuple(objects))


def format_scene(scene: GtScene) -> str:
    """Render a scene as scene-file text (inverse of :func:`parse_scene`)."""
    lines = [f"image {scene.image_w} {scene.image_h} {scene.num_classes}"]
    for obj in scene.objects:
        b = obj.box
        lines.append(f"{obj.class_id} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}")
    return "\n".join(lines) + "\n"


def read_scene_file(path) -> GtScene:
    with open(path, "r", encoding="ascii") as fh:
        return parse_scene(fh.read())


def write_scene_file(path, scene: GtScene) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_scene(scene))


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 image as binary PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # then a single whitespace byte before the raster.
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # the single separator byte after maxval
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM file: magic {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    raster = data[pos : pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()
