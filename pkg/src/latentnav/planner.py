"""Shortest-path planning, path following, and arrival detection.

A fast-marching solve turns the occupancy grid into a distance-to-goal field,
steepest descent on the field traces a waypoint path, and a bang-bang follower
converts the path into discrete actions. Arrival is decided by correlating the
latent map around the agent against the target embedding, and the final
approach refines the relative pose from a pair of RGBD frames.
"""

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (CameraIntrinsics, GridSpec, Pose, grid_to_world,
                       pixel_ray_dirs, world_to_grid_array, wrap_angle)
from .latent_map import LatentGrid
from .localizer import rotation_bank
from .exploration import FREE, OCCUPIED, UNSEEN, OccupancyGrid
from .simworld import FORWARD, FORWARD_STEP, TURN_LEFT, TURN_RIGHT, RgbdFrame

UNSEEN_COST = 2.0      # traversal slowdown through unexplored cells
SEED_RADIUS = 3        # exact-distance initialization ring around the goal
LOOKAHEAD = 0.3        # meters ahead on the path the follower steers at
TURN_DEADBAND = math.radians(15.0)
TAU_STOP = 0.55        # arrival correlation threshold (see calibrate_tau)
K_MIN = 20             # jointly supported cells needed for a stop verdict
PATCH = 32             # stop-decision crop size, matches the query embedding
INLIER_TOL = 0.10      # meters, RANSAC residual acceptance
MIN_INLIERS = 20


class GoalOccupied(ValueError):
    pass


class NoPath(RuntimeError):
    pass


class NotConfident(RuntimeError):
    """Raised when too few correspondences support a relative-pose fit."""


@dataclass
class DistanceField:
    """Meters-to-goal per cell; +inf marks unreachable or obstacle cells."""

    data: np.ndarray
    spec: GridSpec
    goal: tuple


@dataclass
class StopDecision:
    near_target: bool
    confidence: float
    rel_pose: Pose = None  # present only when near_target


@dataclass
class RigidFit:
    """Planar relative pose recovered from frame correspondences."""

    pose: Pose
    inliers: int
    matches: int


def inflate_obstacles(occ: OccupancyGrid) -> np.ndarray:
    """Occupied mask grown by one cell in the 8-neighborhood (agent radius)."""
    occ_mask = occ.data == OCCUPIED
    P = np.pad(occ_mask, 1)
    out = np.zeros_like(occ_mask)
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            out |= P[1 + du:P.shape[0] - 1 + du, 1 + dv:P.shape[1] - 1 + dv]
    return out


def _line_is_free(occ_data, blocked, a, b) -> bool:
    """All cells touched by the segment a->b are free and unblocked."""
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1])) * 4) + 1
    for t in np.linspace(0.0, 1.0, n + 1):
        u = int(round(a[0] + t * (b[0] - a[0])))
        v = int(round(a[1] + t * (b[1] - a[1])))
        if blocked[u, v] or occ_data[u, v] != FREE:
            return False
    return True


def fmm_distance(occ: OccupancyGrid, goal: tuple) -> DistanceField:
    """First-order fast-marching distance-to-goal over traversable cells.

    Unseen cells cost double; occupied cells (inflated by one cell) are +inf.
    Each relaxation also considers plain 8-neighbor steps, which keeps the
    field at or below the 8-connected Dijkstra distance everywhere; cells in
    clear line of sight within a small ring of the goal are seeded with their
    exact Euclidean distance to kill the near-source discretization error.
    """
    U, V = occ.data.shape
    gu, gv = int(goal[0]), int(goal[1])
    if not (0 <= gu < U and 0 <= gv < V):
        raise GoalOccupied(f"goal {goal} outside the grid")
    blocked = inflate_obstacles(occ)
    if occ.data[gu, gv] == OCCUPIED or blocked[gu, gv]:
        raise GoalOccupied(f"goal cell {goal} is not traversable")

    h = occ.spec.resolution
    cost = np.where(occ.data == UNSEEN, UNSEEN_COST, 1.0)
    cost[blocked] = np.inf

    T = np.full((U, V), np.inf)
    T[gu, gv] = 0.0
    heap = [(0.0, gu, gv)]
    for du in range(-SEED_RADIUS, SEED_RADIUS + 1):
        for dv in range(-SEED_RADIUS, SEED_RADIUS + 1):
            u, v = gu + du, gv + dv
            if (du, dv) == (0, 0) or not (0 <= u < U and 0 <= v < V):
                continue
            if _line_is_free(occ.data, blocked, (gu, gv), (u, v)):
                T[u, v] = math.hypot(du, dv) * h
                heapq.heappush(heap, (T[u, v], u, v))

    done = np.zeros((U, V), dtype=bool)
    diag = math.sqrt(2.0)
    while heap:
        t, u, v = heapq.heappop(heap)
        if done[u, v] or t > T[u, v]:
            continue
        done[u, v] = True
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                if (du, dv) == (0, 0):
                    continue
                nu, nv = u + du, v + dv
                if not (0 <= nu < U and 0 <= nv < V) or done[nu, nv]:
                    continue
                c = cost[nu, nv]
                if not math.isfinite(c):
                    continue
                step = diag if (du and dv) else 1.0
                cand = T[u, v] + step * h * 0.5 * (c + cost[u, v])
                a = min(T[nu - 1, nv] if nu > 0 else np.inf,
                        T[nu + 1, nv] if nu < U - 1 else np.inf)
                b = min(T[nu, nv - 1] if nv > 0 else np.inf,
                        T[nu, nv + 1] if nv < V - 1 else np.inf)
                hc = h * c
                if math.isfinite(a) and math.isfinite(b) and abs(a - b) < hc:
                    quad = 0.5 * (a + b + math.sqrt(2.0 * hc * hc - (a - b) ** 2))
                else:
                    quad = min(a, b) + hc
                cand = min(cand, quad)
                if cand < T[nu, nv]:
                    T[nu, nv] = cand
                    heapq.heappush(heap, (cand, nu, nv))
    return DistanceField(T, occ.spec, (gu, gv))


def _bilinear(T: np.ndarray, u: float, v: float) -> float:
    U, V = T.shape
    u = min(max(u, 0.0), U - 1.0)
    v = min(max(v, 0.0), V - 1.0)
    u0, v0 = min(int(u), U - 2), min(int(v), V - 2)
    fu, fv = u - u0, v - v0
    return ((1 - fu) * (1 - fv) * T[u0, v0] + fu * (1 - fv) * T[u0 + 1, v0]
            + (1 - fu) * fv * T[u0, v0 + 1] + fu * fv * T[u0 + 1, v0 + 1])


def _bilinear_grad(T: np.ndarray, u: float, v: float):
    U, V = T.shape
    u = min(max(u, 0.0), U - 1.0 - 1e-9)
    v = min(max(v, 0.0), V - 1.0 - 1e-9)
    u0, v0 = min(int(u), U - 2), min(int(v), V - 2)
    fu, fv = u - u0, v - v0
    du = ((1 - fv) * (T[u0 + 1, v0] - T[u0, v0])
          + fv * (T[u0 + 1, v0 + 1] - T[u0, v0 + 1]))
    dv = ((1 - fu) * (T[u0, v0 + 1] - T[u0, v0])
          + fu * (T[u0 + 1, v0 + 1] - T[u0 + 1, v0]))
    return du, dv


def extract_path(field: DistanceField, start: tuple, occ: OccupancyGrid = None):
    """Steepest-descent waypoints from start cell to the goal, world meters.

    Follows the bilinear gradient of the field in half-cell steps; when the
    local gradient stalls, falls back to the lowest-valued 8-neighbor cell.
    """
    T = field.data
    U, V = T.shape
    su, sv = int(start[0]), int(start[1])
    if not (0 <= su < U and 0 <= sv < V) or not math.isfinite(T[su, sv]):
        raise NoPath(f"no finite distance at start cell {start}")
    finite = T[np.isfinite(T)]
    clamp = np.where(np.isfinite(T), T, finite.max() + 10.0 * field.spec.resolution)

    gu, gv = field.goal
    if (su, sv) == (gu, gv):
        x, y = grid_to_world(field.spec, gu, gv)
        return [(float(x), float(y))]
    pos = np.array([float(su), float(sv)])
    pts = [pos.copy()]
    for _ in range(8 * (U + V) + 100):
        if max(abs(pos[0] - gu), abs(pos[1] - gv)) <= 0.5:
            break
        du, dv = _bilinear_grad(clamp, pos[0], pos[1])
        norm = math.hypot(du, dv)
        stepped = False
        if norm > 1e-12:
            cand = pos - 0.5 * np.array([du, dv]) / norm
            cand[0] = min(max(cand[0], 0.0), U - 1.0)
            cand[1] = min(max(cand[1], 0.0), V - 1.0)
            cu, cv = int(round(cand[0])), int(round(cand[1]))
            if (math.isfinite(T[cu, cv])
                    and _bilinear(clamp, *cand) < _bilinear(clamp, *pos) - 1e-12):
                pos = cand
                stepped = True
        if not stepped:
            # gradient stall: hop toward the best neighboring cell instead
            cu, cv = int(round(pos[0])), int(round(pos[1]))
            best = None
            for ddu in (-1, 0, 1):
                for ddv in (-1, 0, 1):
                    nu, nv = cu + ddu, cv + ddv
                    if (0 <= nu < U and 0 <= nv < V
                            and T[nu, nv] < T[cu, cv]
                            and (best is None or T[nu, nv] < T[best])):
                        best = (nu, nv)
            if best is None:
                raise NoPath(f"descent from {start} stalled at {(cu, cv)}")
            direction = np.array(best, dtype=float) - pos
            pos = pos + 0.5 * direction / max(np.linalg.norm(direction), 1e-12)
        pts.append(pos.copy())
    else:
        raise NoPath(f"descent from {start} did not reach the goal")
    pts.append(np.array([float(gu), float(gv)]))

    xy = [grid_to_world(field.spec, p[0], p[1]) for p in pts]
    return [(float(x), float(y)) for x, y in xy]


def follow(path, pose: Pose, occ: OccupancyGrid = None) -> str:
    """One discrete action steering the agent along the waypoint path.

    Heads for the first waypoint at least LOOKAHEAD meters away (past the
    nearest path point), turning when the heading error exceeds the deadband.
    Never emits Forward into a known-occupied cell and never emits Stop.
    """
    if not path:
        raise ValueError("empty path")
    pts = np.asarray(path, dtype=float)
    d2 = ((pts - [pose.x, pose.y]) ** 2).sum(axis=1)
    nearest = int(np.argmin(d2))
    target = path[-1]
    for k in range(nearest, len(path)):
        if math.hypot(path[k][0] - pose.x, path[k][1] - pose.y) >= LOOKAHEAD:
            target = path[k]
            break
    err = wrap_angle(math.atan2(target[1] - pose.y, target[0] - pose.x)
                     - pose.yaw)
    if abs(err) > TURN_DEADBAND:
        return TURN_LEFT if err > 0 else TURN_RIGHT
    if occ is not None:
        ahead = (pose.x + FORWARD_STEP * math.cos(pose.yaw),
                 pose.y + FORWARD_STEP * math.sin(pose.yaw))
        cells, inb = world_to_grid_array(occ.spec, np.array([ahead]))
        if inb[0] and occ.data[cells[0, 0], cells[0, 1]] == OCCUPIED:
            return TURN_LEFT if err >= 0 else TURN_RIGHT
    return FORWARD


# -- arrival detection ---------------------------------------------------------


def _crop_at(grid: LatentGrid, cell: tuple, size: int):
    """size x size windows of codes and counts centered at cell, zero-padded."""
    U, V, D = grid.m.shape
    m = np.zeros((size, size, D))
    n = np.zeros((size, size), dtype=grid.n.dtype)
    half = size // 2
    u0, v0 = cell[0] - half, cell[1] - half
    su, sv = max(0, -u0), max(0, -v0)
    eu = min(size, U - u0)
    ev = min(size, V - v0)
    if su < eu and sv < ev:
        m[su:eu, sv:ev] = grid.m[u0 + su:u0 + eu, v0 + sv:v0 + ev]
        n[su:eu, sv:ev] = grid.n[u0 + su:u0 + eu, v0 + sv:v0 + ev]
    return m, n


def stop_decision(m_t: LatentGrid, m_trg: LatentGrid, pose_cell: tuple,
                  tau: float = TAU_STOP, k_min: int = K_MIN) -> StopDecision:
    """Is the agent's latent neighborhood the target's? Correlates the map
    patch around the agent against every rotation of the target embedding;
    the verdict needs both a high per-cell cosine and enough joint support.
    """
    patch_m, patch_n = _crop_at(m_t, pose_cell, PATCH)
    best_corr, best_joint, best_rot = -1.0, 0, 0.0
    bank = rotation_bank(m_trg, 18)
    for r, rot in enumerate(bank):
        joint = (patch_n > 0) & (rot.n > 0)
        count = int(joint.sum())
        if count == 0:
            continue
        a = patch_m[joint]
        b = rot.m[joint]
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ok = (na > 1e-12) & (nb > 1e-12)
        if not ok.any():
            continue
        cos = ((a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])).mean()
        if cos > best_corr:
            best_corr, best_joint = float(cos), count
            best_rot = 2.0 * math.pi * r / len(bank)
    confidence = float(min(max(best_corr, 0.0), 1.0))
    near = best_corr >= tau and best_joint >= k_min
    rel = Pose(0.0, 0.0, wrap_angle(-best_rot)) if near else None
    return StopDecision(near, confidence, rel)


def calibrate_tau(scores, labels, target_fpr: float = 0.10) -> float:
    """Smallest threshold whose false-positive rate on (scores, labels) is
    within target_fpr; falls back to just above the top negative score."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    negatives = scores[~labels]
    if negatives.size == 0:
        return float(scores.min())
    for tau in np.unique(scores):
        fpr = (negatives >= tau).mean()
        if fpr <= target_fpr:
            return float(tau)
    return float(negatives.max() + 1e-6)


# -- last-mile relative pose ---------------------------------------------------


KEYPOINT_STRIDE = 3
DESC_HALF = 2          # 5x5 descriptor window
RATIO_MAX = 0.8        # Lowe-style ambiguity rejection
RANSAC_ROUNDS = 200


def _keypoints_and_descriptors(frame: RgbdFrame):
    H, W = frame.depth.shape
    gray = frame.rgb.mean(axis=2)
    margin = DESC_HALF + 1
    rows = np.arange(margin, H - margin, KEYPOINT_STRIDE)
    cols = np.arange(margin, W - margin, KEYPOINT_STRIDE)
    pix, desc = [], []
    for r in rows:
        for c in cols:
            d0 = frame.depth[r, c]
            if d0 <= 0.0:
                continue
            g = gray[r - DESC_HALF:r + DESC_HALF + 1,
                     c - DESC_HALF:c + DESC_HALF + 1]
            z = frame.depth[r - DESC_HALF:r + DESC_HALF + 1,
                            c - DESC_HALF:c + DESC_HALF + 1]
            vec = np.concatenate([(g - g.mean()).ravel(),
                                  0.25 * (z - d0).ravel()])
            pix.append((r, c))
            desc.append(vec)
    return np.array(pix, dtype=int), np.array(desc)


def _lift(frame: RgbdFrame, pix: np.ndarray, intr: CameraIntrinsics):
    """Body-frame xy of the depth returns under the given pixels."""
    dirs = pixel_ray_dirs(intr, pix)
    d = frame.depth[pix[:, 0], pix[:, 1]][:, None]
    return (dirs * d)[:, :2]


def _mutual_matches(da: np.ndarray, db: np.ndarray):
    d2 = ((da[:, None, :] - db[None, :, :]) ** 2).sum(axis=2)
    fwd = np.argmin(d2, axis=1)
    bwd = np.argmin(d2, axis=0)
    idx_a = np.arange(da.shape[0])
    mutual = bwd[fwd] == idx_a
    # ambiguity check: best must beat a strictly informative runner-up;
    # duplicate descriptors (both distances ~0) are unmatchable and dropped
    part = np.partition(d2, 1, axis=1)
    ratio_ok = (part[:, 1] > 1e-12) & (part[:, 0] <= RATIO_MAX ** 2 * part[:, 1])
    keep = mutual & ratio_ok
    return idx_a[keep], fwd[keep]


def _rigid_from_pairs(pa, pb):
    """Least-squares 2D rigid transform mapping pb onto pa."""
    ca, cb = pa.mean(axis=0), pb.mean(axis=0)
    qa, qb = pa - ca, pb - cb
    sc = (qb[:, 0] * qa[:, 1] - qb[:, 1] * qa[:, 0]).sum()
    cc = (qb * qa).sum()
    th = math.atan2(sc, cc)
    R = np.array([[math.cos(th), -math.sin(th)],
                  [math.sin(th), math.cos(th)]])
    t = ca - pb.mean(axis=0) @ R.T
    return th, t


def last_mile_pose(frame_now: RgbdFrame, frame_target: RgbdFrame,
                   intr: CameraIntrinsics, seed: int = 0) -> Pose:
    """Relative pose of the target camera in the current camera's frame.

    Matches local RGBD descriptors between the frames, lifts the matches to
    body-frame points through depth, and fits a planar rigid transform with
    RANSAC over match pairs. Raises NotConfident below MIN_INLIERS inliers.
    """
    pix_a, desc_a = _keypoints_and_descriptors(frame_now)
    pix_b, desc_b = _keypoints_and_descriptors(frame_target)
    if len(pix_a) < 2 or len(pix_b) < 2:
        raise NotConfident("not enough valid keypoints")
    ia, ib = _mutual_matches(desc_a, desc_b)
    if ia.size < 2:
        raise NotConfident(f"only {ia.size} descriptor matches")
    pa = _lift(frame_now, pix_a[ia], intr)
    pb = _lift(frame_target, pix_b[ib], intr)

    rng = np.random.default_rng(seed)
    n = pa.shape[0]
    best_inl = np.zeros(n, dtype=bool)
    for _ in range(RANSAC_ROUNDS):
        i, j = rng.choice(n, size=2, replace=False)
        vb = pb[j] - pb[i]
        va = pa[j] - pa[i]
        nb_, na_ = np.linalg.norm(vb), np.linalg.norm(va)
        if nb_ < 1e-6 or na_ < 1e-6:
            continue
        th = math.atan2(va[1], va[0]) - math.atan2(vb[1], vb[0])
        R = np.array([[math.cos(th), -math.sin(th)],
                      [math.sin(th), math.cos(th)]])
        t = pa[i] - pb[i] @ R.T
        res = np.linalg.norm(pb @ R.T + t - pa, axis=1)
        inl = res < INLIER_TOL
        if inl.sum() > best_inl.sum():
            best_inl = inl
    if int(best_inl.sum()) < MIN_INLIERS:
        raise NotConfident(f"only {int(best_inl.sum())} inliers")
    th, t = _rigid_from_pairs(pa[best_inl], pb[best_inl])
    res = np.linalg.norm(pb @ np.array([[math.cos(th), -math.sin(th)],
                                        [math.sin(th), math.cos(th)]]).T
                         + t - pa, axis=1)
    inl = res < INLIER_TOL
    if int(inl.sum()) < MIN_INLIERS:
        raise NotConfident(f"only {int(inl.sum())} refined inliers")
    th, t = _rigid_from_pairs(pa[inl], pb[inl])
    pose = Pose(float(t[0]), float(t[1]), wrap_angle(th))
    pose.inliers = int(inl.sum())
    return pose
