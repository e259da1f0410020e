"""Procedural 2.5D worlds with an exact raycast RGBD renderer.

Worlds are BSP-split rectangular rooms joined by door gaps, with striped walls
(height 2.5 m), colored boxes, a checkered floor, and a flat ceiling. Rendering
is exact ray/segment and ray/box intersection; depth is the Euclidean hit
distance along each pixel ray, 0 past the 10 m range sentinel.
"""

from __future__ import annotations

import colorsys
import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (CameraIntrinsics, GridSpec, Pose, body_dirs_to_world,
                       camera_ray_dirs, grid_to_world, world_to_grid_array)
from .rng import substream

WALL_HEIGHT = 2.5
STRIPE_PERIOD = 0.3
MAX_RANGE = 10.0
CONTACT_MARGIN = 0.02
DOOR_MIN = 0.8


class PoseInCollision(ValueError):
    pass


class InsufficientSpace(RuntimeError):
    pass


@dataclass(frozen=True)
class WallSegment:
    x1: float
    y1: float
    x2: float
    y2: float
    color: tuple  # rgb in [0,1]


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    height: float
    color: tuple


@dataclass
class World:
    walls: list
    boxes: list
    floor_color: tuple
    ceiling_color: tuple
    seed: int
    rooms: int
    unique_textures: bool = True
    bounds: tuple = (0.0, 0.0, 0.0, 0.0)  # xmin, ymin, xmax, ymax


@dataclass
class NoiseModel:
    """Per-step Gaussian noise; all sigmas zero means exactly deterministic."""

    sigma_xy: float = 0.01
    sigma_yaw: float = math.radians(0.3)
    actuation_scale: float = 0.03
    seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if min(self.sigma_xy, self.sigma_yaw, self.actuation_scale) < 0:
            raise ValueError("noise sigmas must be nonnegative")

    @classmethod
    def off(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0)

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            self._rng = substream(self.seed, "noise")
        return self._rng


@dataclass(frozen=True)
class Episode:
    world_seed: int
    rooms: int
    start: Pose
    target: Pose
    tag: str  # easy | medium | hard
    geodesic: float
    path_type: str  # straight | curved


@dataclass
class RgbdFrame:
    rgb: np.ndarray  # [H, W, 3] in [0,1]
    depth: np.ndarray  # [H, W] meters, 0 = no return
    intr: CameraIntrinsics

BANDS = {"easy": (1.5, 3.0), "medium": (3.0, 5.0), "hard": (5.0, 10.0)}
CURVED_RATIO = 1.2


# -- world generation ----------------------------------------------------------


def _palette_color(rng: np.random.Generator, index: int, unique: bool) -> tuple:
    if not unique:
        return (0.6, 0.6, 0.6)
    # golden-ratio hue walk: every index lands on a distinct hue
    hue = (0.137 + index * 0.381966) % 1.0
    sat = 0.45 + 0.3 * rng.uniform()
    val = 0.55 + 0.35 * rng.uniform()
    return tuple(round(c, 6) for c in colorsys.hsv_to_rgb(hue, sat, val))


def generate_world(seed: int, rooms: int = 3, unique_textures: bool = True) -> World:
    """BSP-split rooms with door gaps >= 0.8 m; every wall gets a palette color."""
    if rooms < 1:
        raise ValueError("rooms must be >= 1")
    rng = substream(seed, "world")
    if rooms == 1:
        half_w = rng.uniform(2.0, 3.5)
        half_h = rng.uniform(2.0, 3.5)
    else:
        half_w = rng.uniform(2.6, 3.4) + 0.55 * rooms
        half_h = rng.uniform(2.6, 3.4) + 0.55 * rooms
    bounds = (-half_w, -half_h, half_w, half_h)

    # leaves are axis-aligned rects; split the largest splittable one until we
    # have `rooms` leaves. A leaf is splittable when the new wall would span at
    # least 1.5 m (room for a door) and both children keep >= 1.4 m of depth.
    leaves = [bounds]
    splits = []  # (axis, coord, lo, hi) interior walls before doors are cut
    while len(leaves) < rooms:
        order = sorted(range(len(leaves)),
                       key=lambda i: -(leaves[i][2] - leaves[i][0]) * (leaves[i][3] - leaves[i][1]))
        i = next((j for j in order
                  if max(leaves[j][2] - leaves[j][0], leaves[j][3] - leaves[j][1]) >= 3.2
                  and min(leaves[j][2] - leaves[j][0], leaves[j][3] - leaves[j][1]) >= 1.5),
                 None)
        if i is None:
            break  # no splittable leaf left; deliver fewer rooms
        xmin, ymin, xmax, ymax = leaves.pop(i)
        axis = 0 if (xmax - xmin) >= (ymax - ymin) else 1
        if axis == 0:
            c = xmin + (xmax - xmin) * rng.uniform(0.42, 0.58)
            leaves.insert(i, (xmin, ymin, c, ymax))
            leaves.insert(i + 1, (c, ymin, xmax, ymax))
            splits.append((0, c, ymin, ymax))
        else:
            c = ymin + (ymax - ymin) * rng.uniform(0.42, 0.58)
            leaves.insert(i, (xmin, ymin, xmax, c))
            leaves.insert(i + 1, (xmin, c, xmax, ymax))
            splits.append((1, c, xmin, xmax))

    walls = []
    widx = 0

    def add_wall(x1, y1, x2, y2):
        nonlocal widx
        walls.append(WallSegment(x1, y1, x2, y2, _palette_color(rng, widx, unique_textures)))
        widx += 1

    xmin, ymin, xmax, ymax = bounds
    add_wall(xmin, ymin, xmax, ymin)
    add_wall(xmax, ymin, xmax, ymax)
    add_wall(xmax, ymax, xmin, ymax)
    add_wall(xmin, ymax, xmin, ymin)

    for k, (axis, c, lo, hi) in enumerate(splits):
        span = hi - lo
        door_w = max(min(rng.uniform(DOOR_MIN, 1.2), span - 0.6), DOOR_MIN)
        # other walls T-junction into this one; a door straddling a junction
        # would be bisected, so keep doors clear of those coordinates
        junctions = [c2 for j, (a2, c2, lo2, hi2) in enumerate(splits)
                     if j != k and a2 != axis
                     and (abs(lo2 - c) < 1e-9 or abs(hi2 - c) < 1e-9) and lo < c2 < hi]
        door_lo = None
        for _ in range(60):
            cand = lo + rng.uniform(0.3, max(span - door_w - 0.3, 0.31))
            if all(abs(jc - (cand + door_w / 2)) > door_w / 2 + 0.55 for jc in junctions):
                door_lo = cand
                break
        if door_lo is None:
            # hug the first junction instead; clearance stays walkable
            door_lo = min(max(junctions[0] + 0.06, lo + 0.3), hi - door_w - 0.3)
        door_hi = door_lo + door_w
        if axis == 0:
            if door_lo - lo > 0.05:
                add_wall(c, lo, c, door_lo)
            if hi - door_hi > 0.05:
                add_wall(c, door_hi, c, hi)
        else:
            if door_lo - lo > 0.05:
                add_wall(lo, c, door_lo, c)
            if hi - door_hi > 0.05:
                add_wall(door_hi, c, hi, c)

    boxes = []
    for room in leaves:
        rxmin, rymin, rxmax, rymax = room
        for _ in range(int(rng.integers(0, 3))):
            w = rng.uniform(0.3, 0.7)
            h = rng.uniform(0.3, 0.7)
            margin = 0.9
            if rxmax - rxmin < w + 2 * margin or rymax - rymin < h + 2 * margin:
                continue
            bx = rng.uniform(rxmin + margin, rxmax - margin - w)
            by = rng.uniform(rymin + margin, rymax - margin - h)
            cand = Box(bx, by, bx + w, by + h, rng.uniform(0.4, 0.9),
                       _palette_color(rng, widx + len(boxes), unique_textures))
            # keep a walkable gap between boxes
            grown = Box(bx - 0.8, by - 0.8, bx + w + 0.8, by + h + 0.8, 0, (0, 0, 0))
            if any(_boxes_overlap(grown, b) for b in boxes):
                continue
            boxes.append(cand)

    floor = (0.35, 0.33, 0.3) if unique_textures else (0.5, 0.5, 0.5)
    ceil = (0.85, 0.85, 0.82)
    return World(walls=walls, boxes=boxes, floor_color=floor, ceiling_color=ceil,
                 seed=seed, rooms=rooms, unique_textures=unique_textures, bounds=bounds)


def add_random_boxes(world: World, count: int, rng: np.random.Generator) -> World:
    """World with `count` extra boxes dropped in free space (scene-change fixture)."""
    extra = list(world.boxes)
    xmin, ymin, xmax, ymax = world.bounds
    tries = 0
    while len(extra) < len(world.boxes) + count and tries < 500:
        tries += 1
        w, h = rng.uniform(0.3, 0.6, 2)
        bx = rng.uniform(xmin + 0.5, xmax - 0.5 - w)
        by = rng.uniform(ymin + 0.5, ymax - 0.5 - h)
        cand = Box(bx, by, bx + w, by + h, rng.uniform(0.5, 1.1),
                   tuple(np.round(rng.uniform(0.2, 0.9, 3), 6)))
        if any(_boxes_overlap(cand, b) for b in extra):
            continue
        extra.append(cand)
    return replace(world, boxes=extra)


def _boxes_overlap(a: Box, b: Box) -> bool:
    return not (a.xmax < b.xmin or b.xmax < a.xmin or a.ymax < b.ymin or b.ymax < a.ymin)


# -- collision -------------------------------------------------------------------


def _point_segment_dist(px, py, seg: WallSegment) -> float:
    vx, vy = seg.x2 - seg.x1, seg.y2 - seg.y1
    wx, wy = px - seg.x1, py - seg.y1
    L2 = vx * vx + vy * vy
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, (wx * vx + wy * vy) / L2))
    dx, dy = wx - t * vx, wy - t * vy
    return math.hypot(dx, dy)


def in_collision(world: World, x: float, y: float, radius: float = CONTACT_MARGIN) -> bool:
    xmin, ymin, xmax, ymax = world.bounds
    if not (xmin + radius <= x <= xmax - radius and ymin + radius <= y <= ymax - radius):
        return True
    for b in world.boxes:
        if b.xmin - radius <= x <= b.xmax + radius and b.ymin - radius <= y <= b.ymax + radius:
            return True
    return any(_point_segment_dist(x, y, w) <= radius for w in world.walls)


# -- raycasting ------------------------------------------------------------------


def _box_edges(b: Box):
    return [(b.xmin, b.ymin, b.xmax, b.ymin), (b.xmax, b.ymin, b.xmax, b.ymax),
            (b.xmax, b.ymax, b.xmin, b.ymax), (b.xmin, b.ymax, b.xmin, b.ymin)]


def raycast(world: World, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit per unit-direction ray.

    Returns (t [N], kind [N] int, index [N], along [N]) where kind is
    0 none, 1 wall, 2 box side, 3 box top, 4 floor, 5 ceiling; `along` is the
    in-plane coordinate used for stripes.
    """
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    kind = np.zeros(n, dtype=np.int64)
    index = np.full(n, -1, dtype=np.int64)
    along = np.zeros(n)
    ox, oy, oz = origin
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    errstate = np.errstate(divide="ignore", invalid="ignore")
    errstate.__enter__()

    for i, w in enumerate(world.walls):
        qx, qy = w.x2 - w.x1, w.y2 - w.y1
        bx, by = w.x1 - ox, w.y1 - oy
        denom = dx * qy - dy * qx
        t = (bx * qy - by * qx) / denom
        s = (bx * dy - by * dx) / denom
        z = oz + t * dz
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
        ok &= (z >= 0.0) & (z <= WALL_HEIGHT) & (t < t_best)
        t_best[ok] = t[ok]
        kind[ok] = 1
        index[ok] = i
        along[ok] = s[ok] * math.hypot(qx, qy)

    for i, b in enumerate(world.boxes):
        tx1, tx2 = (b.xmin - ox) / dx, (b.xmax - ox) / dx
        ty1, ty2 = (b.ymin - oy) / dy, (b.ymax - oy) / dy
        tz1, tz2 = (0.0 - oz) / dz, (b.height - oz) / dz
        txmin, txmax = np.minimum(tx1, tx2), np.maximum(tx1, tx2)
        tymin, tymax = np.minimum(ty1, ty2), np.maximum(ty1, ty2)
        tzmin, tzmax = np.minimum(tz1, tz2), np.maximum(tz1, tz2)
        # axis-parallel rays: slab test degenerates, patch with +-inf
        txmin = np.where(dx == 0, np.where((ox >= b.xmin) & (ox <= b.xmax), -np.inf, np.inf), txmin)
        txmax = np.where(dx == 0, np.where((ox >= b.xmin) & (ox <= b.xmax), np.inf, -np.inf), txmax)
        tymin = np.where(dy == 0, np.where((oy >= b.ymin) & (oy <= b.ymax), -np.inf, np.inf), tymin)
        tymax = np.where(dy == 0, np.where((oy >= b.ymin) & (oy <= b.ymax), np.inf, -np.inf), tymax)
        tzmin = np.where(dz == 0, np.where((oz >= 0) & (oz <= b.height), -np.inf, np.inf), tzmin)
        tzmax = np.where(dz == 0, np.where((oz >= 0) & (oz <= b.height), np.inf, -np.inf), tzmax)
        tenter = np.maximum(np.maximum(txmin, tymin), tzmin)
        texit = np.minimum(np.minimum(txmax, tymax), tzmax)
        ok = (tenter > 1e-9) & (tenter <= texit) & (tenter < t_best)
        top = ok & (tzmin == tenter)
        side = ok & ~top
        t_best[ok] = tenter[ok]
        kind[side] = 2
        kind[top] = 3
        index[ok] = i
        hx = ox + tenter * dx
        hy = oy + tenter * dy
        along[ok] = (hx + hy)[ok]

    t_floor = -oz / dz
    ok = (dz < 0) & (t_floor > 1e-9) & (t_floor < t_best)
    t_best[ok] = t_floor[ok]
    kind[ok] = 4
    index[ok] = -1

    t_ceil = (WALL_HEIGHT - oz) / dz
    ok = (dz > 0) & (t_ceil > 1e-9) & (t_ceil < t_best)
    t_best[ok] = t_ceil[ok]
    kind[ok] = 5
    index[ok] = -1

    errstate.__exit__(None, None, None)
    out_of_range = ~np.isfinite(t_best) | (t_best > MAX_RANGE)
    t_best[out_of_range] = 0.0
    kind[out_of_range] = 0
    return t_best, kind, index, along


def _stripe(value, period=STRIPE_PERIOD, low=0.65):
    return np.where((np.floor(value / period).astype(np.int64) % 2) == 0, 1.0, low)


def render_rgbd(world: World, pose: Pose, intr: CameraIntrinsics) -> RgbdFrame:
    """Exact per-pixel raycast; raises PoseInCollision off the free space."""
    if in_collision(world, pose.x, pose.y):
        raise PoseInCollision(f"camera at ({pose.x:.2f}, {pose.y:.2f})")
    dirs = body_dirs_to_world(pose.yaw, camera_ray_dirs(intr)).reshape(-1, 3)
    origin = np.array([pose.x, pose.y, intr.camera_height])
    t, kind, index, along = raycast(world, origin, dirs)

    n = dirs.shape[0]
    rgb = np.zeros((n, 3))
    hit = origin[None, :] + t[:, None] * dirs

    for i, w in enumerate(world.walls):
        sel = (kind == 1) & (index == i)
        if not sel.any():
            continue
        shade = _stripe(along[sel]) * _stripe(hit[sel, 2], low=0.85)
        rgb[sel] = np.asarray(w.color)[None, :] * shade[:, None]
    for i, b in enumerate(world.boxes):
        sel = (kind == 2) & (index == i)
        if sel.any():
            rgb[sel] = np.asarray(b.color)[None, :] * _stripe(along[sel], low=0.7)[:, None]
        sel = (kind == 3) & (index == i)
        if sel.any():
            rgb[sel] = np.asarray(b.color)[None, :] * 0.9
    sel = kind == 4
    if sel.any():
        checker = ((np.floor(hit[sel, 0] / 0.5) + np.floor(hit[sel, 1] / 0.5)).astype(np.int64) % 2)
        shade = np.where(checker == 0, 1.0, 0.78)
        rgb[sel] = np.asarray(world.floor_color)[None, :] * shade[:, None]
    sel = kind == 5
    if sel.any():
        rgb[sel] = np.asarray(world.ceiling_color)[None, :]

    depth = np.where(kind == 0, 0.0, t)
    H, W = intr.height, intr.width
    return RgbdFrame(rgb=rgb.reshape(H, W, 3), depth=depth.reshape(H, W), intr=intr)


# -- actions ----------------------------------------------------------------------

FORWARD, TURN_LEFT, TURN_RIGHT, STOP = "Forward", "TurnLeft", "TurnRight", "Stop"
ACTIONS = (FORWARD, TURN_LEFT, TURN_RIGHT, STOP)
FORWARD_STEP = 0.25
TURN_STEP = math.radians(10.0)


def step(world: World, pose: Pose, action: str, noise: NoiseModel):
    """Apply one action; returns (new pose, odometry reading as a body-frame delta).

    Forward motion is clipped at wall contact minus 0.02 m. The odometry reading
    is the true body-frame delta plus Gaussian sensor noise.
    """
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    act_eps = noise.rng.normal(size=2) if noise.actuation_scale > 0 else np.zeros(2)
    odo_eps = (noise.rng.normal(size=3)
               if (noise.sigma_xy > 0 or noise.sigma_yaw > 0) else np.zeros(3))

    d_fwd, d_yaw = 0.0, 0.0
    if action == FORWARD:
        want = FORWARD_STEP * (1.0 + noise.actuation_scale * act_eps[0])
        want = max(want, 0.0)
        d_fwd = min(want, forward_clearance(world, pose))
        # an oblique approach can leave less than the margin in perpendicular
        # clearance even after the along-ray clip; back off until clear
        while d_fwd > 0.0 and in_collision(world,
                                           pose.x + math.cos(pose.yaw) * d_fwd,
                                           pose.y + math.sin(pose.yaw) * d_fwd,
                                           radius=CONTACT_MARGIN):
            d_fwd = max(d_fwd - 0.25 * CONTACT_MARGIN, 0.0)
    elif action == TURN_LEFT:
        d_yaw = TURN_STEP * (1.0 + noise.actuation_scale * act_eps[1])
    elif action == TURN_RIGHT:
        d_yaw = -TURN_STEP * (1.0 + noise.actuation_scale * act_eps[1])

    new = Pose(pose.x + math.cos(pose.yaw) * d_fwd,
               pose.y + math.sin(pose.yaw) * d_fwd,
               pose.yaw + d_yaw)
    odom = Pose(d_fwd + noise.sigma_xy * odo_eps[0],
                noise.sigma_xy * odo_eps[1],
                d_yaw + noise.sigma_yaw * odo_eps[2])
    return new, odom


def forward_clearance(world: World, pose: Pose) -> float:
    """Unobstructed forward travel from `pose` minus the contact margin."""
    d = np.array([[math.cos(pose.yaw), math.sin(pose.yaw), 0.0]])
    segs = list(world.walls) + [WallSegment(*e, color=(0, 0, 0))
                                for b in world.boxes for e in _box_edges(b)]
    probe = World(walls=segs, boxes=[], floor_color=(0, 0, 0), ceiling_color=(0, 0, 0),
                  seed=0, rooms=1, bounds=world.bounds)
    t, kind, _, _ = raycast(probe, np.array([pose.x, pose.y, 1.0]), d)
    t_hit = t[0] if kind[0] == 1 else np.inf
    return max(t_hit - CONTACT_MARGIN, 0.0)


# -- occupancy + geodesics ---------------------------------------------------------


def rasterize_occupancy(world: World, spec: GridSpec, radius: float = None) -> np.ndarray:
    """Bool grid: cell center is traversable free space.

    The default clearance radius slightly exceeds the half cell diagonal so a
    zero-thickness wall always blocks the cells it crosses; otherwise two
    adjacent free centers could straddle a wall and geodesics would tunnel.
    """
    if radius is None:
        radius = 0.71 * spec.resolution
    u, v = np.meshgrid(np.arange(spec.cells), np.arange(spec.cells), indexing="ij")
    x, y = grid_to_world(spec, u, v)
    xmin, ymin, xmax, ymax = world.bounds
    free = (x > xmin + radius) & (x < xmax - radius) & (y > ymin + radius) & (y < ymax - radius)
    for w in world.walls:
        vx, vy = w.x2 - w.x1, w.y2 - w.y1
        L2 = vx * vx + vy * vy
        wx, wy = x - w.x1, y - w.y1
        t = np.clip((wx * vx + wy * vy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
        d2 = (wx - t * vx) ** 2 + (wy - t * vy) ** 2
        free &= d2 > radius * radius
    for b in world.boxes:
        free &= ~((x >= b.xmin - radius) & (x <= b.xmax + radius)
                  & (y >= b.ymin - radius) & (y <= b.ymax + radius))
    return free


def grid_dijkstra(free: np.ndarray, source: tuple, resolution: float) -> np.ndarray:
    """8-connected shortest-path distances (meters) over traversable cells."""
    U, V = free.shape
    dist = np.full((U, V), np.inf)
    if not free[source]:
        return dist
    dist[source] = 0.0
    pq = [(0.0, source)]
    diag = math.sqrt(2.0)
    while pq:
        d, (u, v) = heapq.heappop(pq)
        if d > dist[u, v]:
            continue
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                if du == 0 and dv == 0:
                    continue
                nu, nv = u + du, v + dv
                if not (0 <= nu < U and 0 <= nv < V) or not free[nu, nv]:
                    continue
                nd = d + (diag if du and dv else 1.0)
                if nd < dist[nu, nv]:
                    dist[nu, nv] = nd
                    heapq.heappush(pq, (nd, (nu, nv)))
    return dist * resolution


def geodesic_distance(world: World, a: Pose, b: Pose, spec: GridSpec = None) -> float:
    spec = spec or GridSpec()
    free = rasterize_occupancy(world, spec)
    (ua, va), (ub, vb) = _snap_free(free, spec, a), _snap_free(free, spec, b)
    return float(grid_dijkstra(free, (ua, va), spec.resolution)[ub, vb])


def _snap_free(free: np.ndarray, spec: GridSpec, pose: Pose) -> tuple:
    uv, inb = world_to_grid_array(spec, np.array([pose.x, pose.y]))
    u, v = int(uv[0]), int(uv[1])
    if inb and free[u, v]:
        return u, v
    fu, fv = np.nonzero(free)
    if len(fu) == 0:
        raise InsufficientSpace("no free cells")
    k = int(np.argmin((fu - u) ** 2 + (fv - v) ** 2))
    return int(fu[k]), int(fv[k])


def flood_fill_components(free: np.ndarray) -> int:
    """Number of 8-connected free components (world sanity check)."""
    from scipy import ndimage

    _, count = ndimage.label(free, structure=np.ones((3, 3), dtype=np.int64))
    return int(count)


# -- episodes ----------------------------------------------------------------------


def sample_free_pose(world: World, free: np.ndarray, spec: GridSpec,
                     rng: np.random.Generator, margin: float = 0.2) -> Pose:
    fu, fv = np.nonzero(free)
    for _ in range(200):
        k = int(rng.integers(0, len(fu)))
        x, y = grid_to_world(spec, int(fu[k]), int(fv[k]))
        x += rng.uniform(-0.1, 0.1)
        y += rng.uniform(-0.1, 0.1)
        if not in_collision(world, x, y, radius=margin):
            # heading snapped to the 10-degree action lattice
            yaw = math.radians(10.0 * int(rng.integers(0, 36)))
            return Pose(x, y, yaw)
    raise InsufficientSpace("could not sample a free pose")


def generate_episodes(worlds: list, counts: dict, seed: int = 0,
                      spec: GridSpec = None) -> list:
    """Rejection-sample episodes per difficulty band across `worlds`."""
    spec = spec or GridSpec()
    rng = substream(seed, "episodes")
    caches = []
    for w in worlds:
        free = rasterize_occupancy(w, spec)
        caches.append((w, free))
    out = []
    for tag in sorted(counts):
        want = counts[tag]
        lo, hi = BANDS[tag]
        made, attempts = 0, 0
        limit = 100 * max(want, 1)
        while made < want:
            attempts += 1
            if attempts > limit:
                raise InsufficientSpace(f"band {tag}: {made}/{want} after {attempts} tries")
            w, free = caches[int(rng.integers(0, len(caches)))]
            try:
                start = sample_free_pose(w, free, spec, rng)
            except InsufficientSpace:
                continue
            su, sv = _snap_free(free, spec, start)
            dist = grid_dijkstra(free, (su, sv), spec.resolution)
            # one solve, many target draws against it
            for _ in range(30):
                if made >= want:
                    break
                try:
                    target = sample_free_pose(w, free, spec, rng)
                except InsufficientSpace:
                    break
                euclid = math.hypot(target.x - start.x, target.y - start.y)
                if euclid < 1e-6:
                    continue
                tu, tv = _snap_free(free, spec, target)
                geo = float(dist[tu, tv])
                if not (lo <= geo <= hi) or not math.isfinite(geo):
                    continue
                path_type = "curved" if geo / euclid > CURVED_RATIO else "straight"
                out.append(Episode(w.seed, w.rooms, start, target, tag, geo, path_type))
                made += 1
    return out


# -- files -------------------------------------------------------------------------


def save_world(path, world: World) -> None:
    lines = ["META version 1",
             f"META seed {world.seed}",
             f"META rooms {world.rooms}",
             f"META unique_textures {int(world.unique_textures)}",
             "META bounds " + ",".join(repr(b) for b in world.bounds),
             "META floor " + ",".join(repr(c) for c in world.floor_color),
             "META ceiling " + ",".join(repr(c) for c in world.ceiling_color)]
    for w in world.walls:
        lines.append(f"WALL {w.x1!r} {w.y1!r} {w.x2!r} {w.y2!r} "
                     + " ".join(repr(c) for c in w.color))
    for b in world.boxes:
        lines.append(f"BOX {b.xmin!r} {b.ymin!r} {b.xmax!r} {b.ymax!r} {b.height!r} "
                     + " ".join(repr(c) for c in b.color))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_world(path) -> World:
    meta, walls, boxes = {}, [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "META":
                meta[parts[1]] = parts[2]
            elif parts[0] == "WALL":
                vals = [float(p) for p in parts[1:]]
                walls.append(WallSegment(*vals[:4], color=tuple(vals[4:7])))
            elif parts[0] == "BOX":
                vals = [float(p) for p in parts[1:]]
                boxes.append(Box(*vals[:5], color=tuple(vals[5:8])))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
    if meta.get("version") != "1":
        raise ValueError(f"unsupported world file version {meta.get('version')!r}")
    return World(walls=walls, boxes=boxes,
                 floor_color=tuple(float(c) for c in meta["floor"].split(",")),
                 ceiling_color=tuple(float(c) for c in meta["ceiling"].split(",")),
                 seed=int(meta["seed"]), rooms=int(meta["rooms"]),
                 unique_textures=bool(int(meta["unique_textures"])),
                 bounds=tuple(float(b) for b in meta["bounds"].split(",")))


def save_episodes(path, episodes: list) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["world_seed", "rooms", "start_x", "start_y", "start_yaw",
                    "target_x", "target_y", "target_yaw", "tag", "geodesic", "path_type"])
        for e in episodes:
            w.writerow([e.world_seed, e.rooms,
                        repr(e.start.x), repr(e.start.y), repr(e.start.yaw),
                        repr(e.target.x), repr(e.target.y), repr(e.target.yaw),
                        e.tag, repr(e.geodesic), e.path_type])


def load_episodes(path) -> list:
    import csv

    out = []
    with open(path) as f:
        for row in csv.DictReader(f):
            out.append(Episode(int(row["world_seed"]), int(row["rooms"]),
                               Pose(float(row["start_x"]), float(row["start_y"]),
                                    float(row["start_yaw"])),
                               Pose(float(row["target_x"]), float(row["target_y"]),
                                    float(row["target_yaw"])),
                               row["tag"], float(row["geodesic"]), row["path_type"]))
    return out
