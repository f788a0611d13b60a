"""Corner pooling, bilinear sampling, and feature fusion kernels."""
import numpy as np
import pytest

from pointdet.kernels import (
    BOTTOM_RIGHT,
    TOP_LEFT,
    corner_pool,
    corner_pool_backward,
    corner_pool_with_records,
    fuse_features,
    fuse_features_backward,
    sample_points,
    sample_points_backward,
    sample_points_with_records,
)


def corner_pool_reference(grid: np.ndarray, kind: str) -> np.ndarray:
    """Brute-force oracle: out(i, j) = max over the row arm + max over the
    column arm, scanning explicit index ranges."""
    c, h, w = grid.shape
    out = np.empty_like(grid)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                if kind == TOP_LEFT:
                    row = grid[ch, i, j:].max()
                    col = grid[ch, i:, j].max()
                else:
                    row = grid[ch, i, : j + 1].max()
                    col = grid[ch, : i + 1, j].max()
                out[ch, i, j] = row + col
    return out


def test_corner_pool_matches_reference():
    for k in range(60):
        rng = np.random.default_rng(k)
        c, h, w = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        grid = rng.normal(size=(c, h, w))
        for kind in (TOP_LEFT, BOTTOM_RIGHT):
            got = corner_pool(grid, kind)
            ref = corner_pool_reference(grid, kind)
            assert np.max(np.abs(got - ref)) < 1e-9, (k, kind)


def test_corner_pool_worked_value():
    grid = np.array([[[1.0, 3.0, 2.0],
                      [0.0, 5.0, 1.0],
                      [4.0, 0.0, 0.0]]])
    tl = corner_pool(grid, TOP_LEFT)
    # cell (0, 0): row arm max(1,3,2)=3, column arm max(1,0,4)=4 -> 7
    assert tl[0, 0, 0] == 7.0
    # cell (1, 1): row arm max(5,1)=5, column arm max(5,0)=5 -> 10
    assert tl[0, 1, 1] == 10.0
    br = corner_pool(grid, BOTTOM_RIGHT)
    # cell (2, 2): row arm max of full row 2 = 4, column arm max(2,1,0)=2
    assert br[0, 2, 2] == 6.0


def test_corner_pool_ties_route_to_smallest_index():
    # a row of equal values: the running max must report the first index
    grid = np.full((1, 1, 4), 2.0)
    _, rec = corner_pool_with_records(grid, TOP_LEFT)
    g = corner_pool_backward(np.ones((1, 1, 4)), rec)
    # top-left scans rightward/downward, so every cell's row arm attains at
    # its own position first... the leftmost argmax of the suffix is the
    # first position of the max value scanning from j
    assert g.sum() == pytest.approx(8.0)  # gradient mass is conserved
    _, rec_br = corner_pool_with_records(grid, BOTTOM_RIGHT)
    g_br = corner_pool_backward(np.ones((1, 1, 4)), rec_br)
    # bottom-right prefixes all attain at index 0 first
    assert g_br[0, 0, 0] == pytest.approx(4.0 + 1.0)


def test_corner_pool_backward_matches_brute_force():
    """Oracle: scatter each output cell's gradient onto the argmax of each
    arm, taking the smallest index on ties."""
    for k in range(50):
        rng = np.random.default_rng(100 + k)
        h, w = rng.integers(2, 7), rng.integers(2, 7)
        grid = rng.normal(size=(1, h, w))
        gout = rng.normal(size=(1, h, w))
        for kind in (TOP_LEFT, BOTTOM_RIGHT):
            _, rec = corner_pool_with_records(grid, kind)
            got = corner_pool_backward(gout, rec)
            ref = np.zeros_like(grid)
            for i in range(h):
                for j in range(w):
                    if kind == TOP_LEFT:
                        rj = j + int(np.argmax(grid[0, i, j:]))
                        ci = i + int(np.argmax(grid[0, i:, j]))
                    else:
                        rj = int(np.argmax(grid[0, i, : j + 1]))
                        ci = int(np.argmax(grid[0, : i + 1, j]))
                    ref[0, i, rj] += gout[0, i, j]
                    ref[0, ci, j] += gout[0, i, j]
            assert np.max(np.abs(got - ref)) < 1e-9, (k, kind)


def test_sample_points_interior_value():
    grid = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    # point (1.5, 0.5): average of the 2x2 block (0..1, 1..2)
    out = sample_points(grid, np.array([[1.5, 0.5]]))
    expect = (grid[0, 0, 1] + grid[0, 0, 2] + grid[0, 1, 1] + grid[0, 1, 2]) / 4
    assert out[0, 0] == pytest.approx(expect)


def test_sample_points_integer_points_hit_cells_exactly():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(2, 5, 6))
    pts = np.array([[2.0, 3.0], [0.0, 0.0], [5.0, 4.0]])
    out = sample_points(grid, pts)
    assert np.allclose(out[:, 0], grid[:, 3, 2])
    assert np.allclose(out[:, 1], grid[:, 0, 0])
    assert np.allclose(out[:, 2], grid[:, 4, 5])


def test_sample_points_clamps_to_border():
    rng = np.random.default_rng(1)
    grid = rng.normal(size=(1, 4, 4))
    out = sample_points(grid, np.array([[-3.0, -5.0], [10.0, 9.0]]))
    assert out[0, 0] == pytest.approx(grid[0, 0, 0])
    assert out[0, 1] == pytest.approx(grid[0, 3, 3])


def test_sample_points_border_point_gradient_is_zero():
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(1, 4, 4))
    pts = np.array([[-1.0, 2.0], [2.0, 5.0], [1.5, 1.5]])
    out, rec = sample_points_with_records(grid, pts)
    _, gpts = sample_points_backward(np.ones_like(out), rec)
    assert gpts[0, 0] == 0.0  # clamped in x
    assert gpts[1, 1] == 0.0  # clamped in y
    assert np.any(gpts[2] != 0.0)


def test_sample_points_grid_gradient_is_partition_of_unity():
    # with unit output gradient, each point deposits weights summing to 1
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(1, 5, 5))
    pts = rng.uniform(0.2, 3.8, size=(7, 2))
    out, rec = sample_points_with_records(grid, pts)
    ggrid, _ = sample_points_backward(np.ones_like(out), rec)
    assert ggrid.sum() == pytest.approx(7.0)


def test_fuse_features_zero_verification_is_identity():
    rng = np.random.default_rng(4)
    feat = rng.normal(size=(6, 4, 4))
    vers = [np.zeros((2, 4, 4)), np.zeros((3, 4, 4))]
    embeds = [rng.normal(size=(6, 2)), rng.normal(size=(6, 3))]
    assert np.array_equal(fuse_features(feat, vers, embeds), feat)


def test_fuse_features_zero_embed_is_identity():
    rng = np.random.default_rng(5)
    feat = rng.normal(size=(6, 4, 4))
    vers = [rng.normal(size=(2, 4, 4))]
    assert np.array_equal(fuse_features(feat, vers, [np.zeros((6, 2))]), feat)


def test_fuse_features_matches_manual_projection():
    rng = np.random.default_rng(6)
    feat = rng.normal(size=(3, 2, 2))
    ver = rng.normal(size=(2, 2, 2))
    embed = rng.normal(size=(3, 2))
    out = fuse_features(feat, [ver], [embed])
    for y in range(2):
        for x in range(2):
            assert np.allclose(out[:, y, x], feat[:, y, x] + embed @ ver[:, y, x])


def test_fuse_features_backward_blocks_verification_grads():
    rng = np.random.default_rng(7)
    vers = [rng.normal(size=(2, 3, 3))]
    embeds = [rng.normal(size=(4, 2))]
    gout = rng.normal(size=(4, 3, 3))
    gfeat, gembeds, gvers = fuse_features_backward(gout, vers, embeds)
    assert np.array_equal(gfeat, gout)
    assert np.array_equal(gvers[0], np.zeros_like(vers[0]))
    assert gembeds[0].shape == (4, 2)
    assert np.any(gembeds[0] != 0.0)


def test_fuse_features_shape_validation():
    feat = np.zeros((4, 3, 3))
    with pytest.raises(ValueError):
        fuse_features(feat, [np.zeros((2, 2, 2))], [np.zeros((4, 2))])
    with pytest.raises(ValueError):
        fuse_features(feat, [np.zeros((2, 3, 3))], [np.zeros((3, 2))])
    with pytest.raises(ValueError):
        fuse_features(feat, [np.zeros((2, 3, 3))], [])
