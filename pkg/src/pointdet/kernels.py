"""Structured kernels with hand-written backward passes.

Corner pooling, bilinear sampling, and verification-feature fusion as pure
numpy forward/backward pairs.  Forward passes record whatever bookkeeping
(argmax routes, interpolation weights) the matching backward pass needs; the
autodiff layer wraps these records into graph nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TOP_LEFT",
    "BOTTOM_RIGHT",
    "corner_pool",
    "corner_pool_with_records",
    "corner_pool_backward",
    "bilinear_sample",
    "sample_points",
    "sample_points_with_records",
    "sample_points_backward",
    "fuse_features",
    "fuse_features_backward",
]

TOP_LEFT = "top_left"
BOTTOM_RIGHT = "bottom_right"


def _suffix_max_argmax(x: np.ndarray):
    """Running max over k >= j along the last axis.

    Returns (max values, argmax indices); ties resolve to the smallest index.
    """
    n = x.shape[-1]
    m = np.flip(np.maximum.accumulate(np.flip(x, -1), -1), -1)
    idx = np.where(x == m, np.arange(n), n)
    arg = np.flip(np.minimum.accumulate(np.flip(idx, -1), -1), -1)
    return m, arg


def _prefix_max_argmax(x: np.ndarray):
    """Running max over k <= j along the last axis.

    Returns (max values, argmax indices); ties resolve to the smallest index.
    """
    n = x.shape[-1]
    m = np.maximum.accumulate(x, -1)
    newmax = np.empty(x.shape, dtype=bool)
    newmax[..., 0] = True
    newmax[..., 1:] = m[..., 1:] > m[..., :-1]
    idx = np.where(newmax, np.arange(n), -1)
    arg = np.maximum.accumulate(idx, -1)
    return m, arg


@dataclass
class CornerPoolRecords:
    shape: tuple
    row_arg: np.ndarray  # attaining column index for the row scan
    col_arg: np.ndarray  # attaining row index for the column scan


def corner_pool_with_records(grid: np.ndarray, kind: str):
    """Corner pooling over the trailing (H, W) axes.

    For TOP_LEFT, ``out[i, j] = max_{k>=j} g[i, k] + max_{k>=i} g[k, j]``;
    BOTTOM_RIGHT mirrors with ``k <= j`` / ``k <= i``.  Any leading axes are
    treated as independent channels.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim < 2:
        raise ValueError(f"corner_pool needs at least 2 dims, got shape {g.shape}")
    if kind == TOP_LEFT:
        scan = _suffix_max_argmax
    elif kind == BOTTOM_RIGHT:
        scan = _prefix_max_argmax
    else:
        raise ValueError(f"unknown corner pool kind: {kind!r}")
    row_max, row_arg = scan(g)
    col_max_t, col_arg_t = scan(np.swapaxes(g, -1, -2))
    col_max = np.swapaxes(col_max_t, -1, -2)
    col_arg = np.swapaxes(col_arg_t, -1, -2)
    out = row_max + col_max
    return out, CornerPoolRecords(g.shape, row_arg, col_arg)


def corner_pool(grid: np.ndarray, kind: str) -> np.ndarray:
    """Forward-only corner pooling (see :func:`corner_pool_with_records`)."""
    out, _ = corner_pool_with_records(grid, kind)
    return out


def corner_pool_backward(grad_out: np.ndarray, records: CornerPoolRecords) -> np.ndarray:
    """Route output gradients back to the attaining input cells."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != records.shape:
        raise ValueError(
            f"gradient shape {grad_out.shape} does not match input {records.shape}"
        )
    grad_in = np.zeros(records.shape, dtype=np.float64)
    open_idx = np.indices(records.shape, sparse=False)
    row_idx = tuple(open_idx[:-1]) + (records.row_arg,)
    col_idx = tuple(open_idx[:-2]) + (records.col_arg, open_idx[-1])
    np.add.at(grad_in, row_idx, grad_out)
    np.add.at(grad_in, col_idx, grad_out)
    return grad_in


@dataclass
class SampleRecords:
    grid_shape: tuple
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    corners: tuple  # the four gathered (C, P) corner value arrays
    interior_x: np.ndarray
    interior_y: np.ndarray


def sample_points_with_records(grid: np.ndarray, points: np.ndarray):
    """Bilinearly sample a (C, H, W) grid at (P, 2) points given as (x, y).

    Points are in cell units indexing the grid directly; coordinates outside
    [0, W-1] x [0, H-1] clamp to the border (zero point-gradient there).
    Returns ((C, P) samples, records for the backward pass).
    """
    g = np.asarray(grid, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if g.ndim != 3:
        raise ValueError(f"grid must be (C, H, W), got {g.shape}")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (P, 2), got {pts.shape}")
    _, h, w = g.shape
    px, py = pts[:, 0], pts[:, 1]
    interior_x = (px > 0.0) & (px < w - 1)
    interior_y = (py > 0.0) & (py < h - 1)
    x = np.clip(px, 0.0, w - 1)
    y = np.clip(py, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    v00 = g[:, y0, x0]
    v01 = g[:, y0, x1]
    v10 = g[:, y1, x0]
    v11 = g[:, y1, x1]
    out = (
        (1 - wx) * (1 - wy) * v00
        + wx * (1 - wy) * v01
        + (1 - wx) * wy * v10
        + wx * wy * v11
    )
    rec = SampleRecords(
        g.shape, x0, x1, y0, y1, wx, wy, (v00, v01, v10, v11), interior_x, interior_y
    )
    return out, rec


def sample_points(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Forward-only bilinear sampling (see :func:`sample_points_with_records`)."""
    out, _ = sample_points_with_records(grid, points)
    return out


def sample_points_backward(grad_out: np.ndarray, rec: SampleRecords):
    """Backward of :func:`sample_points_with_records`.

    Returns ``(grad_grid, grad_points)``; point gradients are zero where the
    point was clamped to the border.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    c = rec.grid_shape[0]
    if grad_out.shape != (c, rec.x0.shape[0]):
        raise ValueError(f"gradient shape {grad_out.shape} does not match samples")
    wx, wy = rec.wx, rec.wy
    grad_grid = np.zeros(rec.grid_shape, dtype=np.float64)
    ch = np.arange(c)[:, None]
    np.add.at(grad_grid, (ch, rec.y0[None, :], rec.x0[None, :]), (1 - wx) * (1 - wy) * grad_out)
    np.add.at(grad_grid, (ch, rec.y0[None, :], rec.x1[None, :]), wx * (1 - wy) * grad_out)
    np.add.at(grad_grid, (ch, rec.y1[None, :], rec.x0[None, :]), (1 - wx) * wy * grad_out)
    np.add.at(grad_grid, (ch, rec.y1[None, :], rec.x1[None, :]), wx * wy * grad_out)

    v00, v01, v10, v11 = rec.corners
    dvdx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
    dvdy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
    grad_pts = np.empty((rec.x0.shape[0], 2), dtype=np.float64)
    grad_pts[:, 0] = np.sum(grad_out * dvdx, axis=0) * rec.interior_x
    grad_pts[:, 1] = np.sum(grad_out * dvdy, axis=0) * rec.interior_y
    return grad_grid, grad_pts


def bilinear_sample(grid: np.ndarray, point) -> np.ndarray:
    """Sample a (C, H, W) grid at a single (x, y) point, returning (C,)."""
    pt = np.asarray(point, dtype=np.float64).reshape(1, 2)
    out, _ = sample_points_with_records(grid, pt)
    return out[:, 0]


def fuse_features(feature: np.ndarray, verifications, embeds) -> np.ndarray:
    """Add embedded verification outputs onto a feature map.

    ``out = feature + sum_k embed_k @ verification_k`` where each embed is a
    (C, C_k) 1x1 projection applied channelwise.  Verification inputs are
    treated as constants: their gradient contract is exactly zero (see
    :func:`fuse_features_backward`).
    """
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"feature must be (C, H, W), got {f.shape}")
    if len(verifications) != len(embeds):
        raise ValueError("one embed weight per verification output required")
    out = f.copy()
    for ver, w in zip(verifications, embeds):
        ver = np.asarray(ver, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        if ver.ndim != 3 or ver.shape[1:] != f.shape[1:]:
            raise ValueError(
                f"verification map {ver.shape} does not match feature {f.shape}"
            )
        if w.shape != (f.shape[0], ver.shape[0]):
            raise ValueError(
                f"embed weight {w.shape} does not map {ver.shape[0]} -> {f.shape[0]}"
            )
        out += np.einsum("ck,khw->chw", w, ver)
    return out


def fuse_features_backward(grad_out: np.ndarray, verifications, embeds):
    """Backward of :func:`fuse_features`.

    Returns ``(grad_feature, grad_embeds, grad_verifications)``.  The last
    entry is a list of zero arrays: fusion reads verification outputs through
    a gradient stop, so nothing flows back into the verification branches.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_feature = grad_out.copy()
    grad_embeds = []
    grad_vers = []
    for ver, w in zip(verifications, embeds):
        ver = np.asarray(ver, dtype=np.float64)
        grad_embeds.append(np.einsum("chw,khw->ck", grad_out, ver))
        grad_vers.append(np.zeros_like(ver))
    return grad_feature, grad_embeds, grad_vers
