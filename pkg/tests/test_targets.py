"""Target generation: heatmaps, offsets, foreground maps, assignment."""
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pointdet.geometry import BoxXYXY, iou_xyxy
from pointdet.scenes import GtObject, GtScene
from pointdet.targets import (
    BOTTOM_RIGHT,
    TOP_LEFT,
    LevelSpec,
    assign_center_cells,
    build_corner_target,
    build_foreground_target,
    corner_gaussian_sigma,
    corner_radius,
    levels_for_image,
    offset_target,
    quantize,
)


def scene_of(boxes_classes, size=64, ncls=3):
    objs = tuple(GtObject(BoxXYXY(*b), c) for b, c in boxes_classes)
    return GtScene(size, size, ncls, objs)


def test_quantize_worked_value():
    assert quantize((13.0, 7.0), 8) == (1, 0)
    assert quantize((16.0, 15.9), 8) == (2, 1)


def test_offset_target_worked_values():
    assert offset_target((13.0, 7.0), 8) == pytest.approx((0.625, 0.875))
    assert offset_target((3.0, 5.0), 4) == pytest.approx((0.75, 0.25))


@given(
    x=st.floats(0, 1000, allow_nan=False),
    y=st.floats(0, 1000, allow_nan=False),
    s=st.sampled_from([1, 2, 4, 8, 16]),
)
def test_cell_plus_offset_reconstructs_point(x, y, s):
    cx, cy = quantize((x, y), s)
    ox, oy = offset_target((x, y), s)
    assert 0.0 <= ox < 1.0 and 0.0 <= oy < 1.0
    assert (cx + ox) * s == pytest.approx(x, abs=1e-9)
    assert (cy + oy) * s == pytest.approx(y, abs=1e-9)


def test_corner_radius_against_dense_scan():
    """Oracle: densest inward shrink is the worst case over independent
    per-coordinate shifts; scan integer shift combinations to confirm the
    analytic radius keeps IoU >= floor while radius + 1 does not."""
    for k in range(50):
        rng = np.random.default_rng(k)
        w = float(rng.integers(4, 40))
        h = float(rng.integers(4, 40))
        floor = float(rng.uniform(0.2, 0.8))
        r = corner_radius(w, h, floor)
        box = (0.0, 0.0, w, h)

        def worst_iou(radius):
            worst = 1.0
            for dx1 in (-radius, 0, radius):
                for dy1 in (-radius, 0, radius):
                    for dx2 in (-radius, 0, radius):
                        for dy2 in (-radius, 0, radius):
                            x1, y1 = 0.0 + dx1, 0.0 + dy1
                            x2, y2 = w + dx2, h + dy2
                            if x2 <= x1 or y2 <= y1:
                                worst = 0.0
                                continue
                            worst = min(worst, iou_xyxy(box, (x1, y1, x2, y2)))
            return worst

        assert worst_iou(r) >= floor - 1e-9, (w, h, floor)
        assert worst_iou(r * 1.05 + 1e-6) < floor, (w, h, floor)


def test_corner_radius_scales_linearly():
    r1 = corner_radius(10.0, 6.0, 0.3)
    r2 = corner_radius(20.0, 12.0, 0.3)
    assert r2 == pytest.approx(2.0 * r1)


def test_corner_radius_square_worked_value():
    # w = h = 10, floor 0.3: 4r^2 - 40r + 70 = 0 -> r = (40 - sqrt(480)) / 8
    expect = (40.0 - math.sqrt(1600.0 - 4.0 * 4.0 * 0.7 * 100.0)) / 8.0
    assert corner_radius(10.0, 10.0, 0.3) == pytest.approx(expect)
    assert corner_radius(10.0, 10.0, 0.3) == pytest.approx(2.2613872124741694)


def test_sigma_is_radius_third_with_floor():
    assert corner_gaussian_sigma(80.0, 80.0, 8) == pytest.approx(
        corner_radius(10.0, 10.0, 0.3) / 3.0
    )
    assert corner_gaussian_sigma(0.1, 0.1, 8) == 1e-2  # floor kicks in


def test_corner_target_positive_cells_and_offsets():
    scene = scene_of([((13.0, 7.0, 29.0, 23.0), 0)])
    level = LevelSpec(8, 8, 8)
    t = build_corner_target(scene, level)
    # top-left corner (13, 7) -> cell (1, 0), offsets (0.625, 0.875)
    assert t.heatmap[TOP_LEFT, 0, 1] == 1.0
    assert t.pos_mask[TOP_LEFT, 0, 1]
    # bottom-right corner (29, 23) -> cell (3, 2), offsets (0.625, 0.875)
    assert t.heatmap[BOTTOM_RIGHT, 2, 3] == 1.0
    entries = {(e.corner_type, e.cell_x, e.cell_y): (e.target_x, e.target_y)
               for e in t.offsets}
    assert entries[(TOP_LEFT, 1, 0)] == pytest.approx((0.625, 0.875))
    assert entries[(BOTTOM_RIGHT, 3, 2)] == pytest.approx((0.625, 0.875))


def test_corner_target_gaussian_matches_per_cell_max_reference():
    """Oracle: for every cell, the penalty equals the max over corners of
    exp(-d^2 / (2 sigma^2)) with d the cell distance to the corner's cell."""
    for k in range(50):
        rng = np.random.default_rng(200 + k)
        n = int(rng.integers(1, 4))
        boxes = []
        for _ in range(n):
            x1, y1 = rng.uniform(0, 30, 2)
            w, h = rng.uniform(8, 30, 2)
            boxes.append(((x1, y1, min(x1 + w, 63.0), min(y1 + h, 63.0)),
                          int(rng.integers(3))))
        scene = scene_of(boxes)
        level = LevelSpec(8, 8, 8)
        t = build_corner_target(scene, level)

        ref = np.zeros((2, 8, 8))
        for obj in scene.objects:
            b = obj.box
            sigma = corner_gaussian_sigma(b.width, b.height, 8)
            for ctype, corner in ((TOP_LEFT, (b.x1, b.y1)),
                                  (BOTTOM_RIGHT, (b.x2, b.y2))):
                cx, cy = quantize(corner, 8)
                cx = min(max(cx, 0), 7)
                cy = min(max(cy, 0), 7)
                for yy in range(8):
                    for xx in range(8):
                        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
                        g = math.exp(-d2 / (2.0 * sigma * sigma))
                        ref[ctype, yy, xx] = max(ref[ctype, yy, xx], g)
        ref[t.pos_mask] = 1.0
        assert np.max(np.abs(t.heatmap - ref)) < 1e-9


def test_gaussian_value_two_cells_from_peak():
    # a sigma-2 Gaussian evaluated two cells away decays to exp(-0.5)
    assert math.exp(-(2.0**2) / (2.0 * 2.0**2)) == pytest.approx(math.exp(-0.5))
    # and on a built target: a lone corner's penalty two cells to the right
    scene = scene_of([((0.0, 0.0, 48.0, 40.0), 0)])
    level = LevelSpec(8, 8, 8)
    t = build_corner_target(scene, level)
    sigma = corner_gaussian_sigma(48.0, 40.0, 8)
    assert t.heatmap[TOP_LEFT, 0, 2] == pytest.approx(math.exp(-4.0 / (2 * sigma**2)))


def test_corner_on_far_edge_clamps_into_last_cell():
    scene = scene_of([((8.0, 8.0, 64.0, 64.0), 0)])
    level = LevelSpec(8, 8, 8)
    t = build_corner_target(scene, level)
    assert t.heatmap[BOTTOM_RIGHT, 7, 7] == 1.0
    entry = [e for e in t.offsets if e.corner_type == BOTTOM_RIGHT][0]
    assert (entry.cell_x, entry.cell_y) == (7, 7)
    # 64 / 8 = 8 clamps to cell 7, leaving a full-cell offset of 1.0
    assert entry.target_x == pytest.approx(1.0)
    assert entry.target_y == pytest.approx(1.0)


def test_foreground_target_labels_and_weights():
    scene = scene_of([((8.0, 8.0, 24.0, 24.0), 1)])
    level = LevelSpec(8, 8, 8)
    t = build_foreground_target(scene, level, 3)
    # cell centers at pixels 4, 12, 20, ...: columns/rows 1 and 2 inside
    assert t.label[1].sum() == 4
    assert t.label[0].sum() == 0 and t.label[2].sum() == 0
    assert t.num_positive == 4
    # weights: 1 / S with S = 4
    assert np.allclose(t.weight[t.label > 0], 0.25)
    assert t.weight_sum == pytest.approx(1.0)


def test_foreground_weight_collision_takes_smaller_object():
    # two same-class boxes overlap; the shared cell belongs to the smaller S
    scene = scene_of([((0.0, 0.0, 32.0, 16.0), 0), ((8.0, 8.0, 24.0, 24.0), 0)])
    level = LevelSpec(8, 8, 8)
    t = build_foreground_target(scene, level, 3)
    # big box covers cells x 0..3 y 0..1 (S = 8); small covers x 1..2 y 1..2 (S = 4)
    assert t.weight[0, 1, 1] == pytest.approx(0.25)
    assert t.weight[0, 0, 0] == pytest.approx(0.125)


def test_foreground_closed_bounds_includes_boundary_center():
    # box edge exactly on a cell center pixel: closed bounds -> inside
    scene = scene_of([((4.0, 4.0, 12.0, 12.0), 0)])
    t = build_foreground_target(scene, LevelSpec(8, 8, 8), 3)
    assert t.label[0, 0, 0] == 1.0  # center (4, 4) on the box corner
    assert t.label[0, 1, 1] == 1.0  # center (12, 12)
    assert t.num_positive == 4


def test_levels_for_image():
    levels = levels_for_image(64, 64, (4, 8))
    assert [(l.stride, l.height, l.width) for l in levels] == [(4, 16, 16), (8, 8, 8)]
    with pytest.raises(ValueError):
        levels_for_image(63, 64, (4, 8))


def test_assign_center_cells_smaller_area_wins():
    scene = scene_of([((0.0, 0.0, 32.0, 32.0), 0), ((8.0, 8.0, 24.0, 24.0), 1)])
    matches = assign_center_cells(scene, [LevelSpec(8, 8, 8)])[0]
    # both centers land in cell (2, 2) at stride 8 -> smaller box (index 1)
    assert len(matches) == 1
    assert matches[0].object_index == 1
    assert (matches[0].cell_x, matches[0].cell_y) == (2, 2)


def test_assign_center_cells_every_object_present_when_disjoint():
    scene = scene_of([((0.0, 0.0, 14.0, 14.0), 0), ((40.0, 40.0, 60.0, 62.0), 2)])
    per_level = assign_center_cells(scene, levels_for_image(64, 64, (4, 8)))
    for matches in per_level:
        assert sorted(m.object_index for m in matches) == [0, 1]
