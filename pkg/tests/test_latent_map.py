"""Latent map oracles: registration against a per-pixel scatter loop, fusion
arithmetic and order invariance, crops against direct slicing."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from latentnav.autodiff import Tensor, backward, no_grad, reduce_sum
from latentnav.geometry import (CameraIntrinsics, GridSpec, Pose,
                                inverse_project, world_to_grid_array)
from latentnav.latent_map import (DEFAULT_CEILING, Encoder, LatentGrid,
                                  SizeTooLarge, SpecMismatch, crop_at,
                                  crop_center, encode, integrate, load_grid,
                                  register, register_batch_t, save_grid)
from latentnav.simworld import RgbdFrame, generate_world, render_rgbd

INTR = CameraIntrinsics.from_hfov(16, 16, 90.0)
SPEC = GridSpec(resolution=0.25, cells=64)


def random_frame(seed, intr=INTR, max_depth=3.0):
    rng = np.random.default_rng(seed)
    rgb = rng.uniform(0, 1, size=(intr.height, intr.width, 3))
    depth = rng.uniform(0.2, max_depth, size=(intr.height, intr.width))
    depth[rng.uniform(size=depth.shape) < 0.1] = 0.0  # sentinel holes
    return RgbdFrame(rgb=rgb, depth=depth, intr=intr)


def test_encode_unit_norm_and_deterministic():
    enc = Encoder(dim=8, rng=np.random.default_rng(1))
    frame = random_frame(0)
    f1 = encode(frame, enc)
    f2 = encode(frame, enc)
    assert f1.tobytes() == f2.tobytes()
    np.testing.assert_allclose(np.linalg.norm(f1, axis=-1), 1.0, atol=1e-6)


def test_encode_uniform_frame_equal_features():
    enc = Encoder(dim=8, rng=np.random.default_rng(2))
    frame = RgbdFrame(rgb=np.full((16, 16, 3), 0.4), depth=np.full((16, 16), 1.5),
                      intr=INTR)
    f = encode(frame, enc)
    np.testing.assert_allclose(f - f[0, 0], 0.0, atol=1e-12)


def oracle_register(frame, pose, enc, spec, ceiling=DEFAULT_CEILING):
    """Scalar per-pixel scatter."""
    feats = encode(frame, enc)
    pts, valid = inverse_project(frame.depth, pose, frame.intr)
    sums = {}
    counts = {}
    dropped = 0
    H, W = frame.depth.shape
    for h in range(H):
        for w in range(W):
            if not valid[h, w] or pts[h, w, 2] > ceiling:
                continue
            uv, inb = world_to_grid_array(spec, pts[h, w, :2])
            if not inb:
                dropped += 1
                continue
            key = (int(uv[0]), int(uv[1]))
            sums[key] = sums.get(key, 0.0) + feats[h, w]
            counts[key] = counts.get(key, 0) + 1
    m = np.zeros((spec.cells, spec.cells, enc.dim))
    n = np.zeros((spec.cells, spec.cells), dtype=np.int64)
    for key, s in sums.items():
        m[key] = s / counts[key]
        n[key] = counts[key]
    return LatentGrid(m, n, spec), dropped


def test_register_matches_scatter_oracle_exactly():
    enc = Encoder(dim=8, rng=np.random.default_rng(3))
    for seed in range(4):
        frame = random_frame(seed)
        pose = Pose(*np.random.default_rng(seed + 50).uniform(-2, 2, 2), seed * 0.7)
        got, dropped = register(frame, pose, enc, SPEC)
        want, dropped_o = oracle_register(frame, pose, enc, SPEC)
        assert dropped == dropped_o
        np.testing.assert_array_equal(got.n, want.n)
        np.testing.assert_array_equal(got.m, want.m)


def test_register_two_pixels_one_cell():
    enc = Encoder(dim=8, rng=np.random.default_rng(4))
    depth = np.zeros((16, 16))
    depth[8, 8] = 1.0
    depth[8, 7] = 1.0  # adjacent pixel, nearly the same world point
    frame = RgbdFrame(rgb=np.random.default_rng(0).uniform(size=(16, 16, 3)),
                      depth=depth, intr=INTR)
    feats = encode(frame, enc)
    grid, _ = register(frame, Pose(0, 0, 0), enc, SPEC)
    pts, _ = inverse_project(depth, Pose(0, 0, 0), INTR)
    uv, _ = world_to_grid_array(SPEC, pts[8, 8, :2])
    uv2, _ = world_to_grid_array(SPEC, pts[8, 7, :2])
    assert tuple(uv) == tuple(uv2), "test construction: pixels must share a cell"
    cell = (int(uv[0]), int(uv[1]))
    assert grid.n[cell] == 2
    np.testing.assert_array_equal(grid.m[cell], (feats[8, 8] + feats[8, 7]) / 2.0)


def test_register_all_invalid_frame_is_empty():
    enc = Encoder(dim=8, rng=np.random.default_rng(5))
    frame = RgbdFrame(rgb=np.zeros((16, 16, 3)), depth=np.zeros((16, 16)), intr=INTR)
    grid, dropped = register(frame, Pose(0, 0, 0), enc, SPEC)
    assert dropped == 0
    assert grid.n.sum() == 0
    assert not grid.m.any()


def test_register_counts_out_of_bounds_drops():
    enc = Encoder(dim=8, rng=np.random.default_rng(6))
    tiny = GridSpec(resolution=0.25, cells=8)  # +-1 m extent
    frame = random_frame(1, max_depth=3.0)
    grid, dropped = register(frame, Pose(0, 0, 0), enc, tiny)
    assert dropped > 0
    assert grid.n.sum() + dropped == np.count_nonzero(
        (frame.depth > 0)
        & (inverse_project(frame.depth, Pose(0, 0, 0), INTR)[0][..., 2] <= DEFAULT_CEILING))


def test_register_ceiling_cutoff():
    enc = Encoder(dim=8, rng=np.random.default_rng(7))
    depth = np.zeros((16, 16))
    depth[0, 8] = 5.0  # top row looks up; z well above the cutoff
    depth[15, 8] = 1.0  # bottom row looks down
    frame = RgbdFrame(rgb=np.full((16, 16, 3), 0.5), depth=depth, intr=INTR)
    pts, _ = inverse_project(depth, Pose(0, 0, 0), INTR)
    assert pts[0, 8, 2] > DEFAULT_CEILING and pts[15, 8, 2] < DEFAULT_CEILING
    grid, dropped = register(frame, Pose(0, 0, 0), enc, SPEC)
    assert grid.n.sum() == 1 and dropped == 0


# -- fusion ------------------------------------------------------------------------


def manual_grid(rng, spec=SPEC, dim=8, cells=6):
    g = LatentGrid.empty(spec, dim)
    for _ in range(cells):
        u, v = rng.integers(0, spec.cells, 2)
        g.m[u, v] = rng.normal(size=dim)
        g.n[u, v] = rng.integers(1, 5)
    return g


def test_integrate_weighted_mean_example():
    spec = GridSpec(0.25, 4)
    g = LatentGrid.empty(spec, 2)
    loc = LatentGrid.empty(spec, 2)
    g.m[1, 1] = [1.0, 2.0]
    g.n[1, 1] = 3
    loc.m[1, 1] = [5.0, 6.0]
    loc.n[1, 1] = 1
    integrate(g, loc)
    np.testing.assert_allclose(g.m[1, 1], [(5 + 3 * 1) / 4, (6 + 3 * 2) / 4])
    assert g.n[1, 1] == 4


def test_integrate_into_empty_equals_local():
    rng = np.random.default_rng(0)
    loc = manual_grid(rng)
    g = LatentGrid.empty(SPEC, loc.dim)
    integrate(g, loc)
    np.testing.assert_array_equal(g.m, loc.m)
    np.testing.assert_array_equal(g.n, loc.n)


def test_integrate_empty_local_is_identity():
    rng = np.random.default_rng(1)
    g = manual_grid(rng)
    m0, n0 = g.m.copy(), g.n.copy()
    integrate(g, LatentGrid.empty(SPEC, g.dim))
    np.testing.assert_array_equal(g.m, m0)
    np.testing.assert_array_equal(g.n, n0)


def test_integrate_spec_mismatch():
    g = LatentGrid.empty(GridSpec(0.25, 8), 4)
    with pytest.raises(SpecMismatch):
        integrate(g, LatentGrid.empty(GridSpec(0.5, 8), 4))
    with pytest.raises(SpecMismatch):
        integrate(g, LatentGrid.empty(GridSpec(0.25, 8), 8))


def test_fusion_order_invariance_and_count_conservation():
    rng = np.random.default_rng(2)
    locals_ = [manual_grid(rng) for _ in range(4)]
    results = []
    for perm in itertools.permutations(range(4)):
        g = LatentGrid.empty(SPEC, 8)
        for i in perm:
            integrate(g, locals_[i])
        results.append(g)
        assert g.n.sum() == sum(l.n.sum() for l in locals_)
    base = results[0]
    for r in results[1:]:
        np.testing.assert_allclose(r.m, base.m, atol=1e-9)
        np.testing.assert_array_equal(r.n, base.n)


def test_double_register_same_frame_keeps_mean_doubles_counts():
    enc = Encoder(dim=8, rng=np.random.default_rng(8))
    frame = random_frame(3)
    loc, _ = register(frame, Pose(0.2, -0.1, 0.4), enc, SPEC)
    g = LatentGrid.empty(SPEC, 8)
    integrate(g, loc)
    m1 = g.m.copy()
    integrate(g, loc)
    np.testing.assert_allclose(g.m, m1, atol=1e-12)
    np.testing.assert_array_equal(g.n, 2 * loc.n)


def test_batch_registration_equals_serial_fold():
    enc = Encoder(dim=8, rng=np.random.default_rng(9))
    world = generate_world(0, rooms=1)
    intr = CameraIntrinsics.from_hfov(16, 16, 90.0)
    poses = [Pose(0, 0, 0), Pose(0.25, 0, 0), Pose(0.25, 0, math.radians(30))]
    frames = [render_rgbd(world, p, intr) for p in poses]
    g = LatentGrid.empty(SPEC, 8)
    for f, p in zip(frames, poses):
        loc, _ = register(f, p, enc, SPEC)
        integrate(g, loc)
    with no_grad():
        m_t, counts = register_batch_t(frames, poses, enc, SPEC)
    np.testing.assert_allclose(m_t.data, g.m, atol=1e-9)
    np.testing.assert_array_equal(counts, g.n)


def test_batch_registration_gradients_flow():
    enc = Encoder(dim=4, rng=np.random.default_rng(10))
    frame = random_frame(11)
    m_t, _ = register_batch_t([frame], [Pose(0, 0, 0)], enc, SPEC)
    backward(reduce_sum(m_t))
    for p in enc.parameters():
        assert p.grad is not None and np.isfinite(p.grad).all()


# -- crops ------------------------------------------------------------------------


def test_crop_center_identity_and_center_cell():
    rng = np.random.default_rng(3)
    g = manual_grid(rng, spec=GridSpec(0.25, 128), cells=10)
    same = crop_center(g, 128)
    np.testing.assert_array_equal(same.m, g.m)

    one = LatentGrid.empty(GridSpec(0.25, 128), 4)
    one.m[64, 64] = 1.0
    one.n[64, 64] = 2
    c = crop_center(one, 32)
    assert c.n[16, 16] == 2
    assert c.n.sum() == 2
    assert c.spec.cells == 32


def test_crop_center_matches_slicing_oracle():
    rng = np.random.default_rng(4)
    g = manual_grid(rng, spec=GridSpec(0.25, 64), cells=30)
    c = crop_center(g, 20)
    lo = 32 - 10
    np.testing.assert_array_equal(c.m, g.m[lo:lo + 20, lo:lo + 20])
    np.testing.assert_array_equal(c.n, g.n[lo:lo + 20, lo:lo + 20])
    assert c.n.sum() == g.n[lo:lo + 20, lo:lo + 20].sum()


def test_crop_too_large():
    g = LatentGrid.empty(GridSpec(0.25, 16), 4)
    with pytest.raises(SizeTooLarge):
        crop_center(g, 32)


def test_crop_at_pads_and_shifts_origin():
    g = LatentGrid.empty(GridSpec(0.25, 64), 4)
    g.m[2, 2] = 3.0
    g.n[2, 2] = 1
    c = crop_at(g, (2, 2), 32)
    assert c.n[16, 16] == 1
    assert c.n.sum() == 1
    # origin matches the world point of the anchor cell
    assert c.spec.origin_x == pytest.approx((2 - 32) * 0.25)


def test_grid_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    g = manual_grid(rng)
    path = tmp_path / "g.rnrk"
    save_grid(path, g)
    back = load_grid(path)
    assert back.spec == g.spec
    assert back.m.tobytes() == g.m.tobytes()
    np.testing.assert_array_equal(back.n, g.n)
