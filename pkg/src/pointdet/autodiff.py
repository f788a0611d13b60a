"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each operation builds a :class:`Tensor` node holding its value, its parent
nodes, and a closure that routes the node's accumulated gradient back to the
parents.  ``backward`` topologically sorts the graph from a scalar node and
runs the closures in reverse order.  Only what the detector needs is
implemented: convolutions, pointwise nonlinearities, channel plumbing,
corner pooling, bilinear point sampling, and a gradient stop.

Shapes are validated when nodes are built, so graph mistakes fail eagerly at
forward time rather than in the middle of a backward pass.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "add",
    "scale",
    "weighted_sum",
    "relu",
    "sigmoid",
    "conv3x3",
    "conv1x1",
    "corner_pool",
    "stop_gradient",
    "concat_channels",
    "slice_channels",
    "bilinear_sample",
    "sample_point_map",
    "backward",
]


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward", "name")

    def __init__(self, data, *, requires_grad=False, parents=(), op="leaf", backward=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match tensor {self.data.shape} ({self.op})"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, name={self.name!r})"


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, op="parameter", name=name)


def constant(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, op="constant", name=name)


def _node(data, parents, op, backward) -> Tensor:
    return Tensor(data, parents=parents, op=op, backward=backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _node(a.data + b.data, (a, b), "add", None)

    def back():
        if a.requires_grad:
            a.accumulate(out.grad)
        if b.requires_grad:
            b.accumulate(out.grad)

    out._backward = back
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _node(a.data * c, (a,), "scale", None)

    def back():
        if a.requires_grad:
            a.accumulate(out.grad * c)

    out._backward = back
    return out


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar inner product with a fixed weight array (no weight gradient)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.data.shape:
        raise ValueError(f"weight shape {w.shape} does not match tensor {a.data.shape}")
    out = _node(np.float64((a.data * w).sum()), (a,), "weighted_sum", None)

    def back():
        if a.requires_grad:
            a.accumulate(out.grad * w)

    out._backward = back
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = _node(np.where(mask, a.data, 0.0), (a,), "relu", None)

    def back():
        if a.requires_grad:
            a.accumulate(out.grad * mask)

    out._backward = back
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _node(s, (a,), "sigmoid", None)

    def back():
        if a.requires_grad:
            a.accumulate(out.grad * s * (1.0 - s))

    out._backward = back
    return out


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity that blocks the backward pass entirely.

    The returned node has no parents, so ``backward`` never visits anything
    behind it; inspecting ``parents`` of a graph confirms the detachment.
    """
    out = Tensor(a.data.copy(), op="stop_gradient")
    out.name = f"stop({a.name})" if a.name else "stop_gradient"
    return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1 and stride 1 or 2.

    ``x`` is (Cin, H, W), ``w`` is (Cout, Cin, 3, 3), ``b`` is (Cout,).
    """
    if stride not in (1, 2):
        raise ValueError(f"conv3x3 stride must be 1 or 2, got {stride}")
    if x.data.ndim != 3:
        raise ValueError(f"conv3x3 input must be (C, H, W), got {x.data.shape}")
    cout, cin, kh, kw = w.data.shape
    if (kh, kw) != (3, 3) or cin != x.data.shape[0]:
        raise ValueError(f"conv3x3 weight {w.data.shape} does not match input {x.data.shape}")
    if b is not None and b.data.shape != (cout,):
        raise ValueError(f"conv3x3 bias must be ({cout},), got {b.data.shape}")
    _, h, wid = x.data.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * 9)
    wmat = w.data.reshape(cout, cin * 9)
    out_mat = cols @ wmat.T
    if b is not None:
        out_mat = out_mat + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _node(out_mat.T.reshape(cout, ho, wo), parents, "conv3x3", None)

    def back():
        gout_mat = out.grad.reshape(cout, ho * wo).T  # (ho*wo, cout)
        if w.requires_grad:
            w.accumulate((gout_mat.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate(gout_mat.sum(axis=0))
        if x.requires_grad:
            dcols = (gout_mat @ wmat).reshape(ho, wo, cin, 3, 3)
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                        dcols[:, :, :, di, dj].transpose(2, 0, 1)
                    )
            x.accumulate(dxp[:, 1 : 1 + h, 1 : 1 + wid])

    out._backward = back
    return out


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: a per-pixel linear map over channels.

    ``x`` is (Cin, H, W), ``w`` is (Cout, Cin), ``b`` is (Cout,).
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv1x1 input must be (C, H, W), got {x.data.shape}")
    cout, cin = w.data.shape
    if cin != x.data.shape[0]:
        raise ValueError(f"conv1x1 weight {w.data.shape} does not match input {x.data.shape}")
    if b is not None and b.data.shape != (cout,):
        raise ValueError(f"conv1x1 bias must be ({cout},), got {b.data.shape}")
    _, h, wid = x.data.shape
    xmat = x.data.reshape(cin, h * wid)
    out_mat = w.data @ xmat
    if b is not None:
        out_mat = out_mat + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _node(out_mat.reshape(cout, h, wid), parents, "conv1x1", None)

    def back():
        gmat = out.grad.reshape(cout, h * wid)
        if w.requires_grad:
            w.accumulate(gmat @ xmat.T)
        if b is not None and b.requires_grad:
            b.accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            x.accumulate((w.data.T @ gmat).reshape(x.data.shape))

    out._backward = back
    return out


def corner_pool(x: Tensor, kind: str) -> Tensor:
    """Channelwise corner pooling (see :mod:`pointdet.kernels`)."""
    value, rec = kernels.corner_pool_with_records(x.data, kind)
    out = _node(value, (x,), f"corner_pool[{kind}]", None)

    def back():
        if x.requires_grad:
            x.accumulate(kernels.corner_pool_backward(out.grad, rec))

    out._backward = back
    return out


def concat_channels(xs) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    spatial = xs[0].data.shape[1:]
    for t in xs:
        if t.data.ndim != 3 or t.data.shape[1:] != spatial:
            raise ValueError(
                f"concat_channels spatial mismatch: {t.data.shape} vs (*, {spatial})"
            )
    out = _node(np.concatenate([t.data for t in xs], axis=0), xs, "concat_channels", None)
    splits = np.cumsum([t.data.shape[0] for t in xs])[:-1]

    def back():
        pieces = np.split(out.grad, splits, axis=0)
        for t, g in zip(xs, pieces):
            if t.requires_grad:
                t.accumulate(g)

    out._backward = back
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.data.shape[0]
    if not (0 <= start < stop <= c):
        raise ValueError(f"invalid channel slice [{start}:{stop}] of {c}")
    out = _node(x.data[start:stop].copy(), (x,), "slice_channels", None)

    def back():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            x.accumulate(g)

    out._backward = back
    return out


def bilinear_sample(grid: Tensor, point: Tensor) -> Tensor:
    """Sample a (C, H, W) grid at one (x, y) point; differentiable in both."""
    if point.data.shape != (2,):
        raise ValueError(f"point must have shape (2,), got {point.data.shape}")
    value, rec = kernels.sample_points_with_records(grid.data, point.data.reshape(1, 2))
    out = _node(value[:, 0], (grid, point), "bilinear_sample", None)

    def back():
        ggrid, gpts = kernels.sample_points_backward(out.grad.reshape(-1, 1), rec)
        if grid.requires_grad:
            grid.accumulate(ggrid)
        if point.requires_grad:
            point.accumulate(gpts[0])

    out._backward = back
    return out


def sample_point_map(grid: Tensor, points: Tensor) -> Tensor:
    """Sample a feature grid at a per-cell bundle of points.

    ``grid`` is (C, H, W) and ``points`` is (2n, H, W) holding n (x, y)
    pairs per cell in cell units of the same grid.  Returns (n*C, H, W):
    the n sampled feature vectors concatenated per cell.  Differentiable
    with respect to both the grid and the sampling positions.
    """
    if grid.data.ndim != 3 or points.data.ndim != 3:
        raise ValueError("sample_point_map expects (C, H, W) grid and (2n, H, W) points")
    two_n, h, w = points.data.shape
    if two_n % 2 or grid.data.shape[1:] != (h, w):
        raise ValueError(
            f"points {points.data.shape} do not match grid {grid.data.shape}"
        )
    n = two_n // 2
    c = grid.data.shape[0]
    # (2n, H, W) -> (H, W, n, 2) -> (H*W*n, 2)
    pts = points.data.reshape(n, 2, h, w).transpose(2, 3, 0, 1).reshape(-1, 2)
    sampled, rec = kernels.sample_points_with_records(grid.data, pts)  # (C, H*W*n)
    value = (
        sampled.reshape(c, h, w, n).transpose(3, 0, 1, 2).reshape(n * c, h, w)
    )
    out = _node(value, (grid, points), "sample_point_map", None)

    def back():
        gout = out.grad.reshape(n, c, h, w).transpose(1, 2, 3, 0).reshape(c, -1)
        ggrid, gpts = kernels.sample_points_backward(gout, rec)
        if grid.requires_grad:
            grid.accumulate(ggrid)
        if points.requires_grad:
            points.accumulate(
                gpts.reshape(h, w, n, 2).transpose(2, 3, 0, 1).reshape(two_n, h, w)
            )

    out._backward = back
    return out


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar node through the whole graph."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None and node.requires_grad:
            node._backward()
