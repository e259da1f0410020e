"""Geometry oracles: projection checked against a 4x4 homogeneous-matrix path,
digitization and pose algebra against hand-derived cases and group laws."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentnav.geometry import (CameraIntrinsics, GridSpec, OutOfBounds, Pose,
                                camera_ray_dirs, compose, grid_coords,
                                grid_to_world, inverse_project, invert,
                                pixel_ray_dirs, relative_pose, transform_points,
                                world_to_grid, world_to_grid_array, wrap_angle)


def oracle_project(h, w, depth, pose, intr):
    """Independent path: explicit world-from-camera homogeneous matrix.

    Camera axes in the world frame (camera +z forward, +x right, +y down;
    body forward is world +x rotated by yaw):
      z_cam -> (cos yaw, sin yaw, 0)
      x_cam -> right = (sin yaw, -cos yaw, 0)
      y_cam -> down  = (0, 0, -1)
    """
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    T = np.eye(4)
    T[:3, 0] = [s, -c, 0.0]
    T[:3, 1] = [0.0, 0.0, -1.0]
    T[:3, 2] = [c, s, 0.0]
    T[:3, 3] = [pose.x, pose.y, intr.camera_height]
    v = np.array([(w - intr.cx) / intr.fx, (h - intr.cy) / intr.fy, 1.0])
    p_cam = depth * v / np.linalg.norm(v)
    return (T @ np.append(p_cam, 1.0))[:3]


INTR_128 = CameraIntrinsics(fx=64.0, fy=64.0, cx=64.0, cy=64.0, width=128, height=128,
                            camera_height=1.25)


def test_inverse_project_worked_example():
    # pixel (h=64, w=96), depth 1.0, pose (0, 0, pi/2): ray (0.5, 0, 1) in camera
    # coords, unit-normalized, rotated left 90 degrees.
    pose = Pose(0.0, 0.0, math.pi / 2)
    depth = np.zeros((128, 128))
    depth[64, 96] = 1.0
    pts, valid = inverse_project(depth, pose, INTR_128)
    expected = np.array([0.4472135954999579, 0.8944271909999159, 1.25])
    assert valid[64, 96]
    np.testing.assert_allclose(pts[64, 96], expected, atol=1e-12)
    np.testing.assert_allclose(oracle_project(64, 96, 1.0, pose, INTR_128), expected,
                               atol=1e-12)


def test_inverse_project_matches_matrix_oracle():
    rng = np.random.default_rng(7)
    n = 10_000
    hs = rng.integers(0, 128, n)
    ws = rng.integers(0, 128, n)
    ds = rng.uniform(0.05, 10.0, n)
    poses = [Pose(*rng.uniform(-5, 5, 2), rng.uniform(-4, 4)) for _ in range(8)]
    for k, pose in enumerate(poses):
        sl = slice(k * (n // 8), (k + 1) * (n // 8))
        depth = np.zeros((128, 128))
        depth[hs[sl], ws[sl]] = ds[sl]
        pts, valid = inverse_project(depth, pose, INTR_128)
        for h, w, d in zip(hs[sl], ws[sl], ds[sl]):
            if depth[h, w] != d:  # collided pixel, skip
                continue
            assert valid[h, w]
            np.testing.assert_allclose(pts[h, w], oracle_project(h, w, d, pose, INTR_128),
                                       atol=1e-9)


def test_inverse_project_zero_depth_is_invalid():
    pose = Pose(1.0, -2.0, 0.3)
    pts, valid = inverse_project(np.zeros((128, 128)), pose, INTR_128)
    assert not valid.any()
    np.testing.assert_allclose(pts[..., 0], pose.x)
    np.testing.assert_allclose(pts[..., 1], pose.y)
    np.testing.assert_allclose(pts[..., 2], INTR_128.camera_height)


def test_ray_dirs_unit_and_forward():
    d = camera_ray_dirs(INTR_128)
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(d[64, 64], [1.0, 0.0, 0.0], atol=1e-12)
    # pixel right of center looks to the body's right (negative y)
    assert d[64, 96, 1] < 0
    # pixel above center (smaller h) looks up
    assert d[32, 64, 2] > 0
    sel = pixel_ray_dirs(INTR_128, np.array([[64, 64], [32, 64]]))
    np.testing.assert_array_equal(sel[0], d[64, 64])
    np.testing.assert_array_equal(sel[1], d[32, 64])


def test_from_hfov_90_degrees():
    intr = CameraIntrinsics.from_hfov(64, 64, 90.0)
    assert intr.fx == pytest.approx(32.0)
    # leftmost column ray sits at the 45 degree half-angle
    d = camera_ray_dirs(intr)
    ang = math.degrees(math.atan2(abs(d[32, 0, 1]), d[32, 0, 0]))
    assert ang == pytest.approx(45.0)


# -- digitization ---------------------------------------------------------------

SPEC = GridSpec(resolution=0.25, cells=128)


def test_world_to_grid_origin_and_neighbors():
    assert world_to_grid(SPEC, 0.0, 0.0) == (64, 64)
    assert world_to_grid(SPEC, 0.25, -0.25) == (65, 63)
    assert world_to_grid(SPEC, 0.12, 0.13) == (64, 65)  # 0.48 rounds down, 0.52 up


def test_world_to_grid_rounds_half_to_even():
    # exact .5 boundaries: 0.125/0.25 = 0.5 -> 0, 0.375/0.25 = 1.5 -> 2
    assert world_to_grid(SPEC, 0.125, 0.375) == (64, 66)
    assert world_to_grid(SPEC, -0.125, -0.375) == (64, 62)


def test_world_to_grid_out_of_bounds():
    with pytest.raises(OutOfBounds):
        world_to_grid(SPEC, 16.0, 0.0)  # cell 128, one past the edge
    uv, inb = world_to_grid_array(SPEC, np.array([[16.0, 0.0], [-16.2, 0.0], [1.0, 1.0]]))
    assert list(inb) == [False, False, True]


def test_grid_world_roundtrip_all_cells():
    u, v = np.meshgrid(np.arange(128), np.arange(128), indexing="ij")
    x, y = grid_to_world(SPEC, u, v)
    uv, inb = world_to_grid_array(SPEC, np.stack([x, y], axis=-1))
    assert inb.all()
    np.testing.assert_array_equal(uv[..., 0], u)
    np.testing.assert_array_equal(uv[..., 1], v)


def test_grid_coords_fractional():
    g = grid_coords(SPEC, np.array([0.0, 0.0]))
    np.testing.assert_allclose(g, [64.0, 64.0])
    g = grid_coords(SPEC, np.array([0.125, -0.0625]))
    np.testing.assert_allclose(g, [64.5, 63.75])


# -- pose algebra ----------------------------------------------------------------

finite_pose = st.builds(
    Pose,
    st.floats(-50, 50, allow_nan=False),
    st.floats(-50, 50, allow_nan=False),
    st.floats(-20, 20, allow_nan=False),
)


def poses_close(a: Pose, b: Pose, tol=1e-9):
    dyaw = wrap_angle(a.yaw - b.yaw)
    return abs(a.x - b.x) < tol and abs(a.y - b.y) < tol and abs(dyaw) < tol


@given(finite_pose)
def test_compose_identity(p):
    assert poses_close(compose(p, Pose(0, 0, 0)), p)
    assert poses_close(compose(Pose(0, 0, 0), p), p)


@given(finite_pose)
def test_compose_inverse(p):
    assert poses_close(compose(p, invert(p)), Pose(0, 0, 0), tol=1e-7)
    assert poses_close(compose(invert(p), p), Pose(0, 0, 0), tol=1e-7)


@settings(max_examples=200)
@given(finite_pose, finite_pose, finite_pose)
def test_compose_associative(a, b, c):
    assert poses_close(compose(compose(a, b), c), compose(a, compose(b, c)), tol=1e-6)


@given(finite_pose, finite_pose)
def test_relative_pose_roundtrip(a, b):
    assert poses_close(compose(a, relative_pose(a, b)), b, tol=1e-7)


def test_yaw_wrap_half_open():
    assert Pose(0, 0, math.pi).yaw == pytest.approx(math.pi)
    assert Pose(0, 0, -math.pi).yaw == pytest.approx(math.pi)
    assert Pose(0, 0, 3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)
    assert wrap_angle(5 * math.pi) == pytest.approx(math.pi)
    assert float(wrap_angle(0.0)) == 0.0


def test_compose_quarter_turn():
    # step 1 m forward after a left quarter turn: motion is along world +y
    p = compose(Pose(2.0, 1.0, math.pi / 2), Pose(1.0, 0.0, 0.0))
    assert poses_close(p, Pose(2.0, 2.0, math.pi / 2))


def test_transform_points_matches_compose():
    rng = np.random.default_rng(3)
    pose = Pose(0.5, -1.0, 0.7)
    pts = rng.normal(size=(40, 2))
    out = transform_points(pose, pts)
    for p, o in zip(pts, out):
        q = compose(pose, Pose(p[0], p[1], 0.0))
        np.testing.assert_allclose([q.x, q.y], o, atol=1e-12)
