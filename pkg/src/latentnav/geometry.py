"""Planar pose algebra, pinhole camera geometry, and the world<->grid mapping.

COORDINATE CONVENTIONS (everything downstream assumes these):

  World frame:   x/y horizontal, z up.  Agent pose is SE(2): (x, y, yaw) with yaw in
                 (-pi, pi], measured CCW from +x.  The camera sits at height
                 `camera_height` above the agent's (x, y).
  Body frame:    at yaw = 0 the body x axis is world +x (forward), body y is world +y
                 (a positive yaw turns left), body z is up.
  Camera frame:  +z forward (optical axis), +x right (pixel column direction),
                 +y down (pixel row direction).  Camera-to-body for direction
                 vectors: (x_b, y_b, z_b) = (v_z, -v_x, -v_y).
  Pixels:        pixel (h, w) = (row, column), coordinates are bare integer indices
                 (no half-pixel offset): a pixel's camera ray is
                 ((w - cx)/fx, (h - cy)/fy, 1), normalized.
  Depth:         Euclidean distance from the camera center along the pixel ray, in
                 meters.  Depth 0 is the "no return" sentinel and never projects.
  Grid:          cell (u, v) with u indexing world x and v indexing world y,
                 u = rint((x - origin_x)/res) + cells//2 (round half to even).
                 Cell (cells//2, cells//2) is the grid's world origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class OutOfBounds(ValueError):
    """A world point digitizes outside the grid extent."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), TWO_PI)


@dataclass(frozen=True)
class Pose:
    """SE(2) pose; yaw is normalized to (-pi, pi] at construction."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw], dtype=np.float64)


IDENTITY = Pose(0.0, 0.0, 0.0)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of frame b expressed in a's parent frame (a then b)."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def invert(a: Pose) -> Pose:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.yaw)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """b expressed in a's frame: compose(a, relative_pose(a, b)) == b."""
    return compose(invert(a), b)


def transform_points(pose: Pose, pts):
    """Map body-frame xy points [..., 2] into the world frame."""
    pts = np.asarray(pts, dtype=np.float64)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = np.empty_like(pts)
    out[..., 0] = pose.x + c * pts[..., 0] - s * pts[..., 1]
    out[..., 1] = pose.y + s * pts[..., 0] + c * pts[..., 1]
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_height: float = 1.25

    def __post_init__(self):
        if min(self.fx, self.fy) <= 0 or min(self.width, self.height) <= 0:
            raise ValueError("focal lengths and image size must be positive")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float = 90.0,
                  camera_height: float = 1.25) -> "CameraIntrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, camera_height=camera_height)


def camera_ray_dirs(intr: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions in the body frame, one per pixel: [H, W, 3].

    Cached per intrinsics value (the grid only depends on the camera model).
    """
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
    hit = _RAY_CACHE.get(key)
    if hit is not None:
        return hit
    h = np.arange(intr.height, dtype=np.float64)[:, None]
    w = np.arange(intr.width, dtype=np.float64)[None, :]
    vx = (w - intr.cx) / intr.fx * np.ones_like(h)
    vy = (h - intr.cy) / intr.fy * np.ones_like(w)
    norm = np.sqrt(vx * vx + vy * vy + 1.0)
    d = np.stack([1.0 / norm, -vx / norm, -vy / norm], axis=-1)  # body frame
    d.setflags(write=False)
    _RAY_CACHE[key] = d
    return d


_RAY_CACHE: dict = {}


def pixel_ray_dirs(intr: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Body-frame unit ray directions for an [N, 2] array of (h, w) pixels."""
    pixels = np.asarray(pixels)
    return camera_ray_dirs(intr)[pixels[:, 0], pixels[:, 1]]


def body_dirs_to_world(yaw: float, dirs: np.ndarray) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.empty_like(dirs)
    out[..., 0] = c * dirs[..., 0] - s * dirs[..., 1]
    out[..., 1] = s * dirs[..., 0] + c * dirs[..., 1]
    out[..., 2] = dirs[..., 2]
    return out


def inverse_project(depth: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    """Lift a depth image into world-frame 3D points.

    Returns (points [H, W, 3], valid [H, W]); invalid pixels (depth <= 0) hold the
    camera center and must be masked by `valid` before any use.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} != camera {(intr.height, intr.width)}")
    d_world = body_dirs_to_world(pose.yaw, camera_ray_dirs(intr))
    origin = np.array([pose.x, pose.y, intr.camera_height])
    valid = depth > 0
    pts = origin + depth[..., None] * d_world
    pts[~valid] = origin
    return pts, valid


@dataclass(frozen=True)
class GridSpec:
    """Square top-down grid: `cells` per side at `resolution` meters per cell."""

    resolution: float = 0.25
    cells: int = 128
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.resolution <= 0 or self.cells <= 0:
            raise ValueError("resolution and cells must be positive")

    @property
    def center(self) -> int:
        return self.cells // 2

    @property
    def extent(self) -> float:
        return self.cells * self.resolution


def world_to_grid_array(spec: GridSpec, pts):
    """Digitize xy points [..., 2] -> (cells [..., 2] int64, inbounds [...])."""
    pts = np.asarray(pts, dtype=np.float64)
    u = np.rint((pts[..., 0] - spec.origin_x) / spec.resolution).astype(np.int64) + spec.center
    v = np.rint((pts[..., 1] - spec.origin_y) / spec.resolution).astype(np.int64) + spec.center
    inb = (u >= 0) & (u < spec.cells) & (v >= 0) & (v < spec.cells)
    return np.stack([u, v], axis=-1), inb


def world_to_grid(spec: GridSpec, x: float, y: float) -> tuple[int, int]:
    """Digitize one world point; raises OutOfBounds outside the grid."""
    uv, inb = world_to_grid_array(spec, np.array([x, y]))
    if not inb:
        raise OutOfBounds(f"({x:.3f}, {y:.3f}) outside {spec.extent:.1f} m grid")
    return int(uv[0]), int(uv[1])


def grid_to_world(spec: GridSpec, u, v):
    """Cell-center world coordinates (inverse of digitization up to rounding)."""
    x = (np.asarray(u, dtype=np.float64) - spec.center) * spec.resolution + spec.origin_x
    y = (np.asarray(v, dtype=np.float64) - spec.center) * spec.resolution + spec.origin_y
    return x, y


def grid_coords(spec: GridSpec, pts):
    """Continuous (fractional) grid coordinates of xy points, cell centers at integers."""
    pts = np.asarray(pts, dtype=np.float64)
    gu = (pts[..., 0] - spec.origin_x) / spec.resolution + spec.center
    gv = (pts[..., 1] - spec.origin_y) / spec.resolution + spec.center
    return np.stack([gu, gv], axis=-1)
