"""Occupancy mapping and exploration scoring.

Depth columns carve a three-state occupancy grid, morphological thinning turns
free space into a skeleton, and skeleton nodes are ranked by how much unseen
area their rays touch plus a proximity bonus and an optional heatmap score.
"""

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, GridSpec, Pose, camera_ray_dirs,
                       world_to_grid_array)
from .imgio import save_pgm8

UNSEEN, FREE, OCCUPIED = 0, 1, 2
OCC_BAND = (0.1, 1.5)  # hit heights treated as obstacles, meters
FREE_HORIZON = 8.0     # how far a no-return ray clears cells, meters

N_RAYS = 16
RAY_CELLS = 20
DIST_WEIGHT = 0.5
NODE_SPACING = 8
VISITED_WINDOW = 3

SQRT2 = math.sqrt(2.0)


class EmptyGraph(RuntimeError):
    pass


@dataclass
class OccupancyGrid:
    """U x V cells in {UNSEEN, FREE, OCCUPIED} sharing the latent map's spec."""

    data: np.ndarray
    spec: GridSpec

    @classmethod
    def empty(cls, spec: GridSpec) -> "OccupancyGrid":
        return cls(np.zeros((spec.cells, spec.cells), dtype=np.int8), spec)

    def free_mask(self) -> np.ndarray:
        return self.data == FREE

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.data.copy(), self.spec)


def update_occupancy(occ: OccupancyGrid, depth: np.ndarray, pose: Pose,
                     intr: CameraIntrinsics,
                     free_horizon: float = FREE_HORIZON) -> OccupancyGrid:
    """Carve one depth frame into a copy of the grid.

    Each image column is collapsed to a single ground ray: cells up to the
    nearest in-band hit become FREE, that hit's cell becomes OCCUPIED, and
    cells beyond it are left untouched. Columns with no in-band hit clear up
    to their farthest return (or the horizon when some ray had no return).
    """
    out = occ.copy()
    spec = occ.spec
    dirs = camera_ray_dirs(intr)  # [H, W, 3] body frame
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dwx = dirs[..., 0] * c - dirs[..., 1] * s
    dwy = dirs[..., 0] * s + dirs[..., 1] * c
    ground = np.hypot(dwx, dwy)
    g = depth * ground                                # ground-plane distance
    z = intr.camera_height + depth * dirs[..., 2]     # hit height
    valid = depth > 0
    band = valid & (z >= OCC_BAND[0]) & (z <= OCC_BAND[1])

    step = spec.resolution / 2.0
    free_pts, occ_pts = [], []
    for col in range(depth.shape[1]):
        az = math.atan2(dwy[0, col], dwx[0, col])
        ca, sa = math.cos(az), math.sin(az)
        if band[:, col].any():
            d_stop = float(g[:, col][band[:, col]].min())
            occ_pts.append((pose.x + d_stop * ca, pose.y + d_stop * sa))
            d_end = d_stop
        elif valid[:, col].all():
            d_end = float(g[:, col].max())
        else:
            d_end = free_horizon
        ts = np.arange(0.0, d_end, step)
        pts = np.stack([pose.x + ts * ca, pose.y + ts * sa], axis=-1)
        free_pts.append(pts)

    pts = np.concatenate(free_pts, axis=0)
    cells, inb = world_to_grid_array(spec, pts)
    out.data[cells[inb, 0], cells[inb, 1]] = FREE
    if occ_pts:
        cells, inb = world_to_grid_array(spec, np.array(occ_pts))
        out.data[cells[inb, 0], cells[inb, 1]] = OCCUPIED
    return out


# -- skeleton ----------------------------------------------------------------------


def _neighbor_planes(img: np.ndarray):
    """The eight neighbor views P2..P9 (N, NE, E, SE, S, SW, W, NW)."""
    P = np.pad(img, 1)
    return (P[:-2, 1:-1], P[:-2, 2:], P[1:-1, 2:], P[2:, 2:],
            P[2:, 1:-1], P[2:, :-2], P[1:-1, :-2], P[:-2, :-2])


def skeletonize(occ: OccupancyGrid) -> np.ndarray:
    """Two-subiteration thinning of the free mask down to 1-cell curves.

    Runs until a full sweep deletes nothing, which makes the result a fixed
    point: thinning the skeleton again returns it unchanged.
    """
    img = occ.free_mask().astype(np.uint8)
    while True:
        changed = False
        for phase in (0, 1):
            nb = _neighbor_planes(img)
            B = sum(n.astype(np.int32) for n in nb)
            ring = nb + (nb[0],)
            A = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.int32)
                    for i in range(8))
            p2, _, p4, _, p6, _, p8, _ = nb
            if phase == 0:
                cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            kill = (img == 1) & (B >= 2) & (B <= 6) & (A == 1) & cond
            if kill.any():
                img[kill] = 0
                changed = True
        if not changed:
            return img.astype(bool)


# -- graph -------------------------------------------------------------------------


_OFFSETS = [(du, dv) for du in (-1, 0, 1) for dv in (-1, 0, 1)
            if (du, dv) != (0, 0)]


@dataclass
class Node:
    cell: tuple
    exploration: float = 0.0
    latent: float = 0.0

    @property
    def priority(self) -> float:
        return self.exploration + self.latent


@dataclass
class ExplorationGraph:
    """Skeleton nodes plus undirected edges weighted by path length in cells."""

    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)  # (i, j, weight)

    def add_node(self, cell: tuple) -> int:
        key = (int(cell[0]), int(cell[1]))
        if key not in self._index:
            self._index[key] = len(self.nodes)
            self.nodes.append(Node(key))
        return self._index[key]

    def __post_init__(self):
        self._index = {n.cell: i for i, n in enumerate(self.nodes)}

    def neighbors(self, i: int):
        for a, b, w in self.edges:
            if a == i:
                yield b, w
            elif b == i:
                yield a, w


def skeleton_degree(skel: np.ndarray) -> np.ndarray:
    """Branch count per skeleton cell under the reduced adjacency.

    A diagonal link only counts when neither of its two orthogonal corner
    cells is on the skeleton; otherwise the two-step orthogonal path already
    connects the pair, and counting the shortcut would inflate a clean
    4-way crossing into a blob of fake junctions.
    """
    P = np.pad(skel.astype(np.uint8), 1)

    def sl(du, dv):
        return P[1 + du:P.shape[0] - 1 + du, 1 + dv:P.shape[1] - 1 + dv]

    deg = np.zeros(skel.shape, dtype=np.int32)
    for du, dv in _OFFSETS:
        link = sl(du, dv).astype(bool)
        if du and dv:
            link &= ~sl(du, 0).astype(bool) & ~sl(0, dv).astype(bool)
        deg += link
    return deg * skel


def _cell_neighbors(skel: np.ndarray, cell: tuple):
    """Reduced-adjacency neighbors; see skeleton_degree for the rule."""
    U, V = skel.shape

    def on(u, v):
        return 0 <= u < U and 0 <= v < V and skel[u, v]

    for du, dv in _OFFSETS:
        u, v = cell[0] + du, cell[1] + dv
        if not on(u, v):
            continue
        if du and dv and (on(cell[0] + du, cell[1]) or on(cell[0], cell[1] + dv)):
            continue
        yield (u, v)


def _walk(skel: np.ndarray, primary: set, start: tuple, first: tuple,
          seen_edges: set):
    """Follow the skeleton from start through first until the next primary
    cell (or back to start on a pure loop); returns the cell path."""
    path = [start, first]
    seen_edges.add(frozenset((start, first)))
    prev, cur = start, first
    while cur not in primary:
        nxt = None
        for cand in _cell_neighbors(skel, cur):
            if cand != prev and frozenset((cur, cand)) not in seen_edges:
                nxt = cand
                break
        if nxt is None:
            break
        seen_edges.add(frozenset((cur, nxt)))
        path.append(nxt)
        prev, cur = cur, nxt
    return path


def _path_weight(path) -> float:
    return sum(SQRT2 if (abs(a[0] - b[0]) + abs(a[1] - b[1])) == 2 else 1.0
               for a, b in zip(path, path[1:]))


def build_graph(skeleton: np.ndarray) -> ExplorationGraph:
    """Nodes at junctions (>= 3 skeleton neighbors), endpoints, isolated
    cells, and every NODE_SPACING cells along long segments."""
    g = ExplorationGraph()
    deg = skeleton_degree(skeleton)
    cells = list(zip(*np.nonzero(skeleton)))
    primary = {c for c in cells if deg[c] != 2}
    for c in sorted(primary):
        g.add_node(c)

    seen_edges = set()

    def add_segment(path):
        # splice in a spaced node every NODE_SPACING cells, then chain edges
        stops = [0]
        nxt = NODE_SPACING
        for i in range(1, len(path) - 1):
            if i >= nxt and i < len(path) - 3:
                stops.append(i)
                nxt = i + NODE_SPACING
        stops.append(len(path) - 1)
        for a, b in zip(stops, stops[1:]):
            i, j = g.add_node(path[a]), g.add_node(path[b])
            w = _path_weight(path[a:b + 1])
            if i != j or len(path[a:b + 1]) > 2:
                g.edges.append((i, j, w))

    for start in sorted(primary):
        for first in sorted(_cell_neighbors(skeleton, start)):
            if frozenset((start, first)) in seen_edges:
                continue
            add_segment(_walk(skeleton, primary, start, first, seen_edges))

    # pure cycles have no primary cells; seed each with its smallest cell
    leftovers = [c for c in sorted(cells)
                 if c not in primary
                 and any(frozenset((c, n)) not in seen_edges
                         for n in _cell_neighbors(skeleton, c))]
    for c in leftovers:
        for first in sorted(_cell_neighbors(skeleton, c)):
            if frozenset((c, first)) in seen_edges:
                continue
            primary.add(c)
            add_segment(_walk(skeleton, primary, c, first, seen_edges))
    return g


# -- scoring -----------------------------------------------------------------------


def geodesic_cell_distances(occ: OccupancyGrid, source: tuple) -> np.ndarray:
    """8-connected Dijkstra distances in cells over non-occupied space."""
    U, V = occ.data.shape
    dist = np.full((U, V), np.inf)
    if not (0 <= source[0] < U and 0 <= source[1] < V):
        return dist
    if occ.data[source[0], source[1]] == OCCUPIED:
        return dist
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, (u, v) = heapq.heappop(heap)
        if d > dist[u, v]:
            continue
        for du, dv in _OFFSETS:
            nu, nv = u + du, v + dv
            if not (0 <= nu < U and 0 <= nv < V):
                continue
            if occ.data[nu, nv] == OCCUPIED:
                continue
            nd = d + (SQRT2 if du and dv else 1.0)
            if nd < dist[nu, nv]:
                dist[nu, nv] = nd
                heapq.heappush(heap, (nd, (nu, nv)))
    return dist


def exploration_score(cell: tuple, occ: OccupancyGrid, agent_cell: tuple,
                      dist_field: np.ndarray = None) -> float:
    """Unseen fraction over N_RAYS rays of RAY_CELLS, plus a proximity bonus.

    Rays stop at occupied cells or the grid edge; stopped cells don't count.
    """
    U, V = occ.data.shape
    unseen = total = 0
    for k in range(N_RAYS):
        th = 2.0 * math.pi * k / N_RAYS
        ca, sa = math.cos(th), math.sin(th)
        for i in range(1, RAY_CELLS + 1):
            u = cell[0] + int(round(i * ca))
            v = cell[1] + int(round(i * sa))
            if not (0 <= u < U and 0 <= v < V) or occ.data[u, v] == OCCUPIED:
                break
            total += 1
            unseen += occ.data[u, v] == UNSEEN
    score = unseen / total if total else 0.0
    if dist_field is None:
        dist_field = geodesic_cell_distances(occ, agent_cell)
    d = dist_field[cell[0], cell[1]]
    if math.isfinite(d):
        score += DIST_WEIGHT / (1.0 + d)
    return score


def select_target(graph: ExplorationGraph, heatmap: np.ndarray,
                  occ: OccupancyGrid, agent_cell: tuple,
                  visited: tuple = ()) -> Node:
    """Highest exploration + latent priority node, deterministic tie-break.

    The latent score is the 3x3 max of the heatmap around each node, min-max
    rescaled across nodes (all-equal inputs rescale to zero, so a uniform
    heatmap leaves selection to the exploration score alone). Nodes matching
    the last VISITED_WINDOW target cells are excluded unless that empties
    the candidate set.
    """
    if not graph.nodes:
        raise EmptyGraph("no skeleton nodes to choose from")
    dist_field = geodesic_cell_distances(occ, agent_cell)
    U, V = occ.data.shape
    raw = []
    for node in graph.nodes:
        node.exploration = exploration_score(node.cell, occ, agent_cell,
                                             dist_field)
        u, v = node.cell
        win = heatmap[max(0, u - 1):min(U, u + 2), max(0, v - 1):min(V, v + 2)]
        raw.append(float(win.max()) if win.size else 0.0)
    lo, hi = min(raw), max(raw)
    for node, r in zip(graph.nodes, raw):
        node.latent = (r - lo) / (hi - lo) if hi > lo else 0.0

    recent = set(tuple(c) for c in list(visited)[-VISITED_WINDOW:])
    pool = [n for n in graph.nodes if n.cell not in recent]
    if not pool:
        pool = graph.nodes
    return min(pool, key=lambda n: (-n.priority, n.cell))


# -- debug dumps -------------------------------------------------------------------


def save_occupancy_pgm(path, occ: OccupancyGrid) -> None:
    levels = np.array([0, 128, 255], dtype=np.uint8)
    save_pgm8(path, levels[occ.data])


def save_skeleton_pgm(path, skeleton: np.ndarray) -> None:
    save_pgm8(path, skeleton.astype(np.uint8) * 255)


def save_nodes_csv(path, graph: ExplorationGraph) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["u", "v", "exploration", "latent", "priority"])
        for n in graph.nodes:
            wr.writerow([n.cell[0], n.cell[1], f"{n.exploration:.6f}",
                         f"{n.latent:.6f}", f"{n.priority:.6f}"])
