"""Finite-difference verification of every analytic gradient in the package.

Each registered check draws random inputs, computes the analytic gradient,
and compares it against central differences.  The relative error metric is
``|a - n| / max(|a|, |n|, 1)`` taken elementwise; a check passes when its
worst element over all trials stays below the threshold.

Piecewise-defined functions (max selections, smooth-L1 kinks, ReLU) are
sampled away from their switch points: central differences straddle a kink
arbitrarily badly, which says nothing about the gradient on either side.

``inject_bug`` flips the sign of one check's analytic gradient, proving the
harness actually detects a wrong derivative and names its source.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from . import losses as L
from .geometry import ConversionMode, points_to_box_with_grad
from .model import HeadConfig, Model, compute_losses
from .scenes import GtObject, GtScene
from .geometry import BoxXYXY
from .targets import CornerTarget, ForegroundTarget

__all__ = [
    "CheckResult",
    "relative_error",
    "fd_grad",
    "available_checks",
    "run_checks",
]

THRESHOLD = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    trials: int
    max_err: float
    threshold: float = THRESHOLD
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_err < self.threshold


def relative_error(analytic, numeric) -> float:
    """Worst-case elementwise relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def fd_grad(fn, x, h: float = STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at array ``x``."""
    # order="C" so reshape(-1) below is a writable view even when the
    # caller hands over a transposed (non-contiguous) array.
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ----------------------------------------------------------------------
# random input helpers


def _spread_points(rng, n: int, lo=-4.0, hi=4.0, gap=1e-3) -> np.ndarray:
    """Points with pairwise-distinct coordinates on both axes.

    Keeps min/max selections stable under the finite-difference step.
    """
    while True:
        pts = rng.uniform(lo, hi, size=(n, 2))
        ok = True
        for axis in range(2):
            c = np.sort(pts[:, axis])
            if np.min(np.diff(c)) < gap:
                ok = False
                break
        if ok:
            return pts


def _rand_box(rng, span=8.0, min_side=1.0) -> np.ndarray:
    x1, y1 = rng.uniform(0.0, span, size=2)
    w, h = rng.uniform(min_side, span * 0.6, size=2)
    return np.array([x1, y1, x1 + w, y1 + h])


def _giou_safe_pair(rng, gap=1e-3):
    """Two boxes away from every giou switch point (ties, zero overlap)."""
    while True:
        a = _rand_box(rng)
        b = _rand_box(rng)
        if np.min(np.abs(a - b)) < gap:
            continue
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        if abs(iw) < gap or abs(ih) < gap:
            continue
        return a, b


def _distinct_grid(rng, shape, step=0.01) -> np.ndarray:
    """A grid of unique values with gaps well above the FD step."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * step
    return (vals + rng.uniform(0.0, step * 0.1, size=n)).reshape(shape)


def _interior_points(rng, n, w, h, margin=0.6, frac_gap=1e-3) -> np.ndarray:
    """Strictly interior sample positions away from the integer lattice."""
    pts = np.empty((n, 2))
    for i in range(n):
        while True:
            x = rng.uniform(margin, w - 1 - margin)
            y = rng.uniform(margin, h - 1 - margin)
            fx, fy = x - np.floor(x), y - np.floor(y)
            if frac_gap < fx < 1 - frac_gap and frac_gap < fy < 1 - frac_gap:
                pts[i] = (x, y)
                break
    return pts


def _rand_corner_target(rng, h=5, w=6) -> tuple[CornerTarget, int]:
    heat = rng.uniform(0.0, 0.9, size=(2, h, w))
    pos = np.zeros_like(heat, dtype=bool)
    for ch in range(2):
        k = int(rng.integers(1, 4))
        idx = rng.choice(h * w, size=k, replace=False)
        pos[ch].reshape(-1)[idx] = True
    heat[pos] = 1.0
    return CornerTarget(heatmap=heat, pos_mask=pos, offsets=[]), max(int(pos.sum()) // 2, 1)


def _rand_fg_target(rng, c=3, h=4, w=5) -> ForegroundTarget:
    while True:
        mask = rng.random((c, h, w)) < 0.2
        if mask.any():
            break
    label = mask.astype(np.float64)
    weight = np.zeros_like(label)
    weight[mask] = 1.0 / rng.integers(1, 9, size=int(mask.sum()))
    return ForegroundTarget(label, weight, int(mask.sum()), float(weight.sum()))


# ----------------------------------------------------------------------
# check bodies: each returns a list of (analytic, numeric) gradient pairs


def _check_conversion(mode: ConversionMode):
    def run(rng, trials):
        pairs = []
        for _ in range(trials):
            pts = _spread_points(rng, 9)
            u = rng.normal(size=4)
            mult = float(rng.uniform(1.5, 2.5))
            _, back = points_to_box_with_grad(pts, mode, moment_multiplier=mult)
            dpts, dmult = back(u)

            def f_pts(q):
                box, _ = points_to_box_with_grad(
                    q.reshape(-1, 2), mode, moment_multiplier=mult
                )
                return float(box @ u)

            pairs.append((dpts, fd_grad(f_pts, pts)))
            if mode is ConversionMode.MOMENT:

                def f_mult(m):
                    box, _ = points_to_box_with_grad(
                        pts, mode, moment_multiplier=float(m[0])
                    )
                    return float(box @ u)

                pairs.append((np.array([dmult]), fd_grad(f_mult, np.array([mult]))))
        return pairs

    return run


def _check_giou(rng, trials):
    pairs = []
    for _ in range(trials):
        a, b = _giou_safe_pair(rng)
        _, grad = L.giou_with_grad(a, b)
        pairs.append((grad, fd_grad(lambda q: L.giou_with_grad(q, b)[0], a)))
    return pairs


def _check_corner_heatmap(rng, trials):
    pairs = []
    for _ in range(trials):
        target, n_obj = _rand_corner_target(rng)
        p = rng.uniform(0.05, 0.95, size=target.heatmap.shape)
        out = L.corner_heatmap_loss(p, target, n_obj)
        num = fd_grad(lambda q: L.corner_heatmap_loss(q, target, n_obj).value, p)
        pairs.append((out.grad, num))
    return pairs


def _check_offsets(rng, trials):
    pairs = []
    for _ in range(trials):
        k = int(rng.integers(1, 6))
        pred = rng.uniform(0.02, 0.98, size=(k, 2))
        tgt = rng.uniform(0.0, 1.0, size=(k, 2))
        out = L.offset_loss(pred, tgt)
        pairs.append((out.grad, fd_grad(lambda q: L.offset_loss(q, tgt).value, pred)))
    return pairs


def _check_foreground(rng, trials):
    pairs = []
    for _ in range(trials):
        target = _rand_fg_target(rng)
        p = rng.uniform(0.05, 0.95, size=target.label.shape)
        out = L.normalized_focal_loss(p, target)
        num = fd_grad(lambda q: L.normalized_focal_loss(q, target).value, p)
        pairs.append((out.grad, num))
    return pairs


def _check_cls_focal(rng, trials):
    pairs = []
    for _ in range(trials):
        t = (rng.random((3, 4, 5)) < 0.15).astype(np.float64)
        p = rng.uniform(0.05, 0.95, size=t.shape)
        norm = max(float(t.sum()), 1.0)
        out = L.focal_loss(p, t, norm)
        pairs.append((out.grad, fd_grad(lambda q: L.focal_loss(q, t, norm).value, p)))
    return pairs


def _check_reg_smooth_l1(rng, trials):
    pairs = []
    for _ in range(trials):
        m = int(rng.integers(1, 5))
        gt = np.stack([_rand_box(rng) for _ in range(m)])
        while True:
            r = rng.uniform(-2.5, 2.5, size=(m, 4))
            if np.min(np.abs(np.abs(r) - 1.0)) > 1e-3:
                break
        pred = gt + r
        out = L.regression_loss(pred, gt, L.RegressionMode.SMOOTH_L1)
        num = fd_grad(
            lambda q: L.regression_loss(q, gt, L.RegressionMode.SMOOTH_L1).value, pred
        )
        pairs.append((out.grad, num))
    return pairs


def _check_reg_giou(rng, trials):
    pairs = []
    for _ in range(trials):
        m = int(rng.integers(1, 4))
        preds, gts = [], []
        for _ in range(m):
            a, b = _giou_safe_pair(rng)
            preds.append(a)
            gts.append(b)
        pred, gt = np.stack(preds), np.stack(gts)
        out = L.regression_loss(pred, gt, L.RegressionMode.GIOU)
        num = fd_grad(
            lambda q: L.regression_loss(q, gt, L.RegressionMode.GIOU).value, pred
        )
        pairs.append((out.grad, num))
    return pairs


def _check_points_regression(rng, trials):
    """Full chain: moment conversion (smooth) into giou regression."""
    pairs = []
    mode, conv = L.RegressionMode.GIOU, ConversionMode.MOMENT
    for _ in range(trials):
        m = 2
        while True:
            pts = np.stack([_spread_points(rng, 9, lo=0.0, hi=6.0) for _ in range(m)])
            gt = np.stack([_rand_box(rng, span=5.0) for _ in range(m)])
            mult = float(rng.uniform(1.5, 2.5))
            ok = True
            for i in range(m):
                box, _ = points_to_box_with_grad(pts[i], conv, moment_multiplier=mult)
                iw = min(box[2], gt[i][2]) - max(box[0], gt[i][0])
                ih = min(box[3], gt[i][3]) - max(box[1], gt[i][1])
                if (
                    np.min(np.abs(box - gt[i])) < 1e-3
                    or abs(iw) < 1e-3
                    or abs(ih) < 1e-3
                ):
                    ok = False
                    break
            if ok:
                break
        out, dmult = L.points_regression_loss(pts, gt, mode, conv, moment_multiplier=mult)

        def f_pts(q):
            o, _ = L.points_regression_loss(
                q.reshape(pts.shape), gt, mode, conv, moment_multiplier=mult
            )
            return o.value

        def f_mult(v):
            o, _ = L.points_regression_loss(
                pts, gt, mode, conv, moment_multiplier=float(v[0])
            )
            return o.value

        pairs.append((out.grad, fd_grad(f_pts, pts)))
        pairs.append((np.array([dmult]), fd_grad(f_mult, np.array([mult]))))
    return pairs


def _check_corner_pool(kind: str):
    def run(rng, trials):
        pairs = []
        for _ in range(trials):
            grid = _distinct_grid(rng, (2, 5, 6))
            out, rec = kernels.corner_pool_with_records(grid, kind)
            u = rng.normal(size=out.shape)
            analytic = kernels.corner_pool_backward(u, rec)
            num = fd_grad(
                lambda q: float((kernels.corner_pool(q, kind) * u).sum()), grid
            )
            pairs.append((analytic, num))
        return pairs

    return run


def _check_sample_points(rng, trials):
    pairs = []
    for _ in range(trials):
        c, h, w = 3, 5, 6
        grid = rng.normal(size=(c, h, w))
        pts = _interior_points(rng, 4, w, h)
        out, rec = kernels.sample_points_with_records(grid, pts)
        u = rng.normal(size=out.shape)
        ggrid, gpts = kernels.sample_points_backward(u, rec)
        num_grid = fd_grad(lambda q: float((kernels.sample_points(q, pts) * u).sum()), grid)
        num_pts = fd_grad(lambda q: float((kernels.sample_points(grid, q) * u).sum()), pts)
        pairs.append((ggrid, num_grid))
        pairs.append((gpts, num_pts))
    return pairs


def _check_fuse(rng, trials):
    pairs = []
    for _ in range(trials):
        c, h, w = 4, 3, 4
        feat = rng.normal(size=(c, h, w))
        vers = [rng.normal(size=(2, h, w)), rng.normal(size=(3, h, w))]
        embeds = [rng.normal(size=(c, 2)), rng.normal(size=(c, 3))]
        out = kernels.fuse_features(feat, vers, embeds)
        u = rng.normal(size=out.shape)
        gf, ge, _ = kernels.fuse_features_backward(u, vers, embeds)
        num_f = fd_grad(
            lambda q: float((kernels.fuse_features(q, vers, embeds) * u).sum()), feat
        )
        pairs.append((gf, num_f))
        for k in range(2):

            def f_embed(q, k=k):
                es = [q if i == k else embeds[i] for i in range(2)]
                return float((kernels.fuse_features(feat, vers, es) * u).sum())

            pairs.append((ge[k], fd_grad(f_embed, embeds[k])))
    return pairs


def _graph_pairs(rng, build, inputs):
    """FD-check a Tensor graph: scalar = weighted sum of build(*inputs)."""
    params = [ad.parameter(x) for x in inputs]
    out = build(*params)
    u = rng.normal(size=out.data.shape)
    root = ad.weighted_sum(out, u)
    ad.backward(root)
    pairs = []
    for i, p in enumerate(params):

        def f(q, i=i):
            trial = [ad.constant(x) for x in inputs]
            trial[i] = ad.constant(q)
            return float((build(*trial).data * u).sum())

        pairs.append((p.grad, fd_grad(f, inputs[i])))
    return pairs


def _check_conv3x3(stride: int):
    def run(rng, trials):
        pairs = []
        for _ in range(trials):
            x = rng.normal(size=(2, 5, 6))
            w = rng.normal(size=(3, 2, 3, 3)) * 0.5
            b = rng.normal(size=(3,))
            pairs += _graph_pairs(
                rng, lambda xt, wt, bt: ad.conv3x3(xt, wt, bt, stride=stride), [x, w, b]
            )
        return pairs

    return run


def _check_conv1x1(rng, trials):
    pairs = []
    for _ in range(trials):
        x = rng.normal(size=(3, 4, 5))
        w = rng.normal(size=(2, 3)) * 0.5
        b = rng.normal(size=(2,))
        pairs += _graph_pairs(rng, ad.conv1x1, [x, w, b])
    return pairs


def _check_relu(rng, trials):
    pairs = []
    for _ in range(trials):
        while True:
            x = rng.normal(size=(2, 4, 5))
            if np.min(np.abs(x)) > 1e-3:
                break
        pairs += _graph_pairs(rng, ad.relu, [x])
    return pairs


def _check_sigmoid(rng, trials):
    pairs = []
    for _ in range(trials):
        x = rng.normal(size=(2, 4, 5)) * 2.0
        pairs += _graph_pairs(rng, ad.sigmoid, [x])
    return pairs


def _check_add_scale(rng, trials):
    pairs = []
    for _ in range(trials):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 3, 4))
        pairs += _graph_pairs(
            rng, lambda at, bt: ad.add(ad.scale(at, 1.7), bt), [a, b]
        )
    return pairs


def _check_concat_slice(rng, trials):
    pairs = []
    for _ in range(trials):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(3, 3, 4))
        pairs += _graph_pairs(
            rng,
            lambda at, bt: ad.slice_channels(ad.concat_channels([at, bt]), 1, 4),
            [a, b],
        )
    return pairs


def _check_graph_corner_pool(rng, trials):
    pairs = []
    for _ in range(trials):
        x = _distinct_grid(rng, (2, 4, 5))
        pairs += _graph_pairs(rng, lambda t: ad.corner_pool(t, kernels.TOP_LEFT), [x])
    return pairs


def _check_graph_bilinear(rng, trials):
    pairs = []
    for _ in range(trials):
        grid = rng.normal(size=(3, 5, 6))
        pt = _interior_points(rng, 1, 6, 5)[0]
        pairs += _graph_pairs(rng, ad.bilinear_sample, [grid, pt])
    return pairs


def _check_sample_point_map(rng, trials):
    pairs = []
    for _ in range(trials):
        c, h, w, n = 2, 4, 5, 3
        grid = rng.normal(size=(c, h, w))
        pts = (
            _interior_points(rng, n * h * w, w, h)
            .reshape(h, w, n, 2)
            .transpose(2, 3, 0, 1)
            .reshape(2 * n, h, w)
        )
        pairs += _graph_pairs(rng, ad.sample_point_map, [grid, pts])
    return pairs


def _check_model_losses(rng, trials):
    """End-to-end: FD a random subset of model parameters through the
    forward pass and every loss component at once."""
    pairs = []
    cfg = HeadConfig(channels=6, num_points=9, conversion=ConversionMode.MOMENT)
    scene = GtScene(
        16, 16, 3, (GtObject(BoxXYXY(2.0, 3.0, 11.0, 9.0), 0),)
    )
    for t in range(trials):
        model = Model(cfg, seed=int(rng.integers(0, 2**31)))
        image = rng.uniform(-0.5, 0.5, size=(3, 16, 16))

        def loss_value():
            return float(compute_losses(model, model.forward(image), scene).total.data)

        model.zero_grad()
        ad.backward(compute_losses(model, model.forward(image), scene).total)
        names = sorted(model.params)
        for _ in range(10):
            name = names[int(rng.integers(len(names)))]
            tensor = model.params[name]
            idx = int(rng.integers(tensor.data.size))
            flat = tensor.data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + STEP
            fp = loss_value()
            flat[idx] = orig - STEP
            fm = loss_value()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * STEP)
            analytic = (
                0.0 if tensor.grad is None else float(tensor.grad.reshape(-1)[idx])
            )
            pairs.append((np.array([analytic]), np.array([numeric])))
    return pairs


CHECKS = {
    "box_from_points.min_max": _check_conversion(ConversionMode.MIN_MAX),
    "box_from_points.partial_min_max": _check_conversion(ConversionMode.PARTIAL_MIN_MAX),
    "box_from_points.moment": _check_conversion(ConversionMode.MOMENT),
    "box_from_points.explicit_corners": _check_conversion(ConversionMode.EXPLICIT_CORNERS),
    "giou": _check_giou,
    "loss.corner_heatmap": _check_corner_heatmap,
    "loss.corner_offsets": _check_offsets,
    "loss.foreground": _check_foreground,
    "loss.classification_focal": _check_cls_focal,
    "loss.regression_smooth_l1": _check_reg_smooth_l1,
    "loss.regression_giou": _check_reg_giou,
    "loss.points_regression": _check_points_regression,
    "kernel.corner_pool_top_left": _check_corner_pool(kernels.TOP_LEFT),
    "kernel.corner_pool_bottom_right": _check_corner_pool(kernels.BOTTOM_RIGHT),
    "kernel.sample_points": _check_sample_points,
    "kernel.fuse_features": _check_fuse,
    "graph.conv3x3": _check_conv3x3(1),
    "graph.conv3x3_stride2": _check_conv3x3(2),
    "graph.conv1x1": _check_conv1x1,
    "graph.relu": _check_relu,
    "graph.sigmoid": _check_sigmoid,
    "graph.add_scale": _check_add_scale,
    "graph.concat_slice": _check_concat_slice,
    "graph.corner_pool": _check_graph_corner_pool,
    "graph.bilinear_sample": _check_graph_bilinear,
    "graph.sample_point_map": _check_sample_point_map,
    "model.compute_losses": _check_model_losses,
}

# Heavier checks run fewer trials to keep the suite fast.
_TRIAL_OVERRIDES = {"model.compute_losses": 1}


def available_checks() -> list[str]:
    return list(CHECKS)


def run_checks(
    seed: int = 0,
    trials: int = 4,
    names: list[str] | None = None,
    inject_bug: str | None = None,
) -> list[CheckResult]:
    """Run the registered checks and return one result per check.

    Args:
        seed: RNG seed for the random inputs.
        trials: random input instances per check (heavy checks may use fewer).
        names: subset of check names; defaults to all of them.
        inject_bug: name of one check whose analytic gradient is negated
            before comparison, to demonstrate failure detection.
    """
    selected = names if names is not None else available_checks()
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")
    if inject_bug is not None and inject_bug not in CHECKS:
        raise KeyError(f"unknown gradient check {inject_bug!r}")
    results = []
    for name in selected:
        rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
        t0 = time.perf_counter()
        n_trials = _TRIAL_OVERRIDES.get(name, trials)
        pairs = CHECKS[name](rng, n_trials)
        worst = 0.0
        for analytic, numeric in pairs:
            if inject_bug == name:
                analytic = -np.asarray(analytic)
            worst = max(worst, relative_error(analytic, numeric))
        results.append(
            CheckResult(name, n_trials, worst, THRESHOLD, time.perf_counter() - t0)
        )
    return results
