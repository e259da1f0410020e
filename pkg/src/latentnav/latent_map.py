"""Latent grid construction: encode RGBD pixels to unit features, scatter-average
them into top-down cells, and fuse local grids into a global map by running mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import (Mlp, ShapeMismatch, Tensor, div, gather_rows, mul,
                       no_grad, reduce_sum, reshape, scatter_sum, sqrt)
from .geometry import GridSpec, Pose, inverse_project, world_to_grid_array
from .simworld import RgbdFrame

DEPTH_NORM = 10.0  # sensor max range; scales the depth channel into [0,1]
DEFAULT_CEILING = 2.0


class SpecMismatch(ValueError):
    pass


class SizeTooLarge(ValueError):
    pass


@dataclass
class LatentGrid:
    m: np.ndarray  # [cells, cells, D]
    n: np.ndarray  # [cells, cells] int64 observation counts
    spec: GridSpec

    @classmethod
    def empty(cls, spec: GridSpec, dim: int) -> "LatentGrid":
        return cls(np.zeros((spec.cells, spec.cells, dim)),
                   np.zeros((spec.cells, spec.cells), dtype=np.int64), spec)

    @property
    def dim(self) -> int:
        return self.m.shape[-1]

    def copy(self) -> "LatentGrid":
        return LatentGrid(self.m.copy(), self.n.copy(), self.spec)

    def support(self) -> np.ndarray:
        return self.n > 0


class Encoder:
    """Per-pixel feature net over a 3x3 RGBD receptive field, L2-normalized."""

    def __init__(self, dim: int = 16, hidden: int = 32, rng: np.random.Generator = None):
        self.dim = dim
        self.hidden = hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlp = Mlp([36, hidden, dim], ["relu", "none"], rng)

    def parameters(self):
        return self.mlp.parameters()

    def to_arrays(self) -> dict:
        out = self.mlp.named_parameters("enc")
        out["enc.meta"] = np.array([self.dim, self.hidden], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Encoder":
        dim, hidden = (int(x) for x in arrays["enc.meta"])
        enc = cls(dim=dim, hidden=hidden, rng=np.random.default_rng(0))
        enc.mlp.load_named("enc", arrays)
        return enc


def _patch_rows(frame: RgbdFrame) -> np.ndarray:
    """[H*W, 36] rows: the 3x3 neighborhood of (r, g, b, depth/10), edge-padded."""
    img = np.concatenate([frame.rgb, frame.depth[..., None] / DEPTH_NORM], axis=-1)
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = frame.depth.shape
    windows = [p[i:i + H, j:j + W] for i in range(3) for j in range(3)]
    return np.concatenate(windows, axis=-1).reshape(H * W, 36)


def encode_t(frame: RgbdFrame, enc: Encoder) -> Tensor:
    """Tape path: [H*W, D] unit-norm features."""
    h = enc.mlp(Tensor(_patch_rows(frame)))
    norm = sqrt(reduce_sum(mul(h, h), axis=1, keepdims=True) + Tensor(1e-12))
    return div(h, norm)


def encode(frame: RgbdFrame, enc: Encoder) -> np.ndarray:
    """[H, W, D] unit-norm per-pixel features (pure forward)."""
    if frame.rgb.shape[:2] != frame.depth.shape:
        raise ShapeMismatch(f"rgb {frame.rgb.shape} vs depth {frame.depth.shape}")
    H, W = frame.depth.shape
    with no_grad():
        return encode_t(frame, enc).data.reshape(H, W, enc.dim)


def _projected_cells(frame: RgbdFrame, pose: Pose, spec: GridSpec, ceiling: float):
    """(flat cell ids [K], flat kept pixel indices [K], dropped-out-of-bounds count)."""
    pts, valid = inverse_project(frame.depth, pose, frame.intr)
    keep = valid & (pts[..., 2] <= ceiling)
    uv, inb = world_to_grid_array(spec, pts[..., :2])
    dropped = int(np.count_nonzero(keep & ~inb))
    keep &= inb
    flat = np.nonzero(keep.ravel())[0]
    ids = (uv[..., 0].ravel() * spec.cells + uv[..., 1].ravel())[flat]
    return ids, flat, dropped


def register(frame: RgbdFrame, pose: Pose, enc: Encoder, spec: GridSpec,
             ceiling: float = DEFAULT_CEILING):
    """Local grid for one frame: per-cell mean of projected pixel features.

    Returns (LatentGrid, dropped) where `dropped` counts valid pixels that
    digitized outside the grid extent.
    """
    feats = encode(frame, enc)
    ids, flat, dropped = _projected_cells(frame, pose, spec, ceiling)
    nc = spec.cells * spec.cells
    sums = np.zeros((nc, enc.dim))
    np.add.at(sums, ids, feats.reshape(-1, enc.dim)[flat])
    counts = np.bincount(ids, minlength=nc).astype(np.int64)
    m = sums / np.maximum(counts, 1)[:, None]
    grid = LatentGrid(m.reshape(spec.cells, spec.cells, enc.dim),
                      counts.reshape(spec.cells, spec.cells), spec)
    return grid, dropped


def register_batch_t(frames: list, poses: list, enc: Encoder, spec: GridSpec,
                     ceiling: float = DEFAULT_CEILING):
    """Tape path over several frames jointly: equals the serial register+integrate
    fold (the fusion rule is a running mean).

    Returns (m: Tensor [cells, cells, D], counts: int64 [cells, cells]).
    """
    nc = spec.cells * spec.cells
    total = np.zeros(nc, dtype=np.int64)
    sums = None
    for frame, pose in zip(frames, poses):
        ids, flat, _ = _projected_cells(frame, pose, spec, ceiling)
        feats = gather_rows(encode_t(frame, enc), flat)
        part = scatter_sum(feats, ids, nc)
        sums = part if sums is None else sums + part
        total += np.bincount(ids, minlength=nc).astype(np.int64)
    m = div(sums, Tensor(np.maximum(total, 1)[:, None].astype(np.float64)))
    return (reshape(m, (spec.cells, spec.cells, enc.dim)),
            total.reshape(spec.cells, spec.cells))


def integrate(global_grid: LatentGrid, local: LatentGrid) -> LatentGrid:
    """Fuse `local` into `global_grid` in place (count-weighted running mean)."""
    if global_grid.spec != local.spec or global_grid.dim != local.dim:
        raise SpecMismatch(f"{global_grid.spec}/{global_grid.dim} vs {local.spec}/{local.dim}")
    ng = global_grid.n.astype(np.float64)[..., None]
    nl = local.n.astype(np.float64)[..., None]
    tot = ng + nl
    merged = (local.m * nl + global_grid.m * ng) / np.maximum(tot, 1.0)
    # one-sided cells pass through exactly; the blend formula costs an ulp
    merged = np.where(nl == 0, global_grid.m, np.where(ng == 0, local.m, merged))
    global_grid.m = np.where(tot > 0, merged, 0.0)
    global_grid.n = global_grid.n + local.n
    return global_grid


def crop_center(grid: LatentGrid, size: int) -> LatentGrid:
    """Centered sub-grid; the grid's world origin cell stays the center cell."""
    if size > grid.spec.cells:
        raise SizeTooLarge(f"crop {size} from {grid.spec.cells}")
    lo = grid.spec.cells // 2 - size // 2
    hi = lo + size
    spec = GridSpec(grid.spec.resolution, size, grid.spec.origin_x, grid.spec.origin_y)
    return LatentGrid(grid.m[lo:hi, lo:hi].copy(), grid.n[lo:hi, lo:hi].copy(), spec)


def crop_at(grid: LatentGrid, cell: tuple, size: int) -> LatentGrid:
    """Sub-grid centered on `cell`; zero-padded where the window leaves the map."""
    if size > grid.spec.cells:
        raise SizeTooLarge(f"crop {size} from {grid.spec.cells}")
    cu, cv = cell
    half = size // 2
    m = np.zeros((size, size, grid.dim))
    n = np.zeros((size, size), dtype=np.int64)
    lo_u, lo_v = cu - half, cv - half
    su, eu = max(lo_u, 0), min(lo_u + size, grid.spec.cells)
    sv, ev = max(lo_v, 0), min(lo_v + size, grid.spec.cells)
    if su < eu and sv < ev:
        m[su - lo_u:eu - lo_u, sv - lo_v:ev - lo_v] = grid.m[su:eu, sv:ev]
        n[su - lo_u:eu - lo_u, sv - lo_v:ev - lo_v] = grid.n[su:eu, sv:ev]
    from .geometry import grid_to_world

    ox, oy = grid_to_world(grid.spec, cu, cv)
    spec = GridSpec(grid.spec.resolution, size, float(ox), float(oy))
    return LatentGrid(m, n, spec)


def save_grid(path, grid: LatentGrid) -> None:
    checkpoint.save_arrays(path, {
        "grid.m": grid.m,
        "grid.n": grid.n.astype(np.float64),
        "grid.spec": np.array([grid.spec.resolution, grid.spec.cells,
                               grid.spec.origin_x, grid.spec.origin_y]),
    })


def load_grid(path) -> LatentGrid:
    a = checkpoint.load_arrays(path)
    res, cells, ox, oy = a["grid.spec"]
    spec = GridSpec(float(res), int(cells), float(ox), float(oy))
    return LatentGrid(a["grid.m"].copy(), a["grid.n"].astype(np.int64), spec)
