"""Volumetric rendering of latent grids and the autoencoder training loop.

Per ray: stratified samples u_i in [u_near, u_far], latent code q fetched by
bilinear interpolation of the grid at each sample's xy, a small MLP whose
hidden layers are scaled/shifted by linear maps of q (modulation conditioning),
then the standard quadrature

    w_i = T_i (1 - exp(-sigma_i delta_i)),  T_i = exp(-sum_{j<i} sigma_j delta_j)
    color = sum_i w_i a_i + (1 - sum_i w_i) * background,  depth = sum_i w_i u_i.

Samples with zero map support contribute exactly zero opacity, so unobserved
space renders exactly the background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (Adam, ShapeMismatch, Tensor, as_tensor, backward,
                       bilinear_sample_2d, concat,
                       cumsum_exclusive, l1_distance, no_grad, param, reshape)
from .geometry import CameraIntrinsics, GridSpec, Pose, pixel_ray_dirs, relative_pose
from .latent_map import (DEFAULT_CEILING, Encoder, LatentGrid, register_batch_t)
from .rng import substream
from .simworld import RgbdFrame, render_rgbd


class PixelOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class RaySamplingSpec:
    u_near: float = 0.1
    u_far: float = 8.0
    samples_per_ray: int = 24
    background: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not (0 <= self.u_near < self.u_far) or self.samples_per_ray < 2:
            raise ValueError("need 0 <= u_near < u_far and samples_per_ray >= 2")


class Decoder:
    """Per-point field: inputs (in-cell offset, height), hidden layers modulated
    by the sampled latent code, softplus sigma / sigmoid color.

    The field is deliberately view-independent: pose only reaches the output
    through where the rays sample it, so photometric pose optimization cannot
    trade heading error against direction-conditioned appearance error."""

    LAYERS = 2
    IN_FEATURES = 3  # frac_u, frac_v, z/ceiling

    def __init__(self, dim: int = 16, hidden: int = 64, rng: np.random.Generator = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.hidden = dim, hidden
        self.w, self.b, self.ws, self.bs, self.wh, self.bh = [], [], [], [], [], []
        fan = self.IN_FEATURES
        for _ in range(self.LAYERS):
            self.w.append(param(rng.normal(0, math.sqrt(2.0 / fan), (fan, hidden))))
            self.b.append(param(np.zeros(hidden)))
            # modulation starts as identity (scale 1, shift 0): early training is
            # stable before the latent code takes over
            self.ws.append(param(np.zeros((dim, hidden))))
            self.bs.append(param(np.ones(hidden)))
            self.wh.append(param(np.zeros((dim, hidden))))
            self.bh.append(param(np.zeros(hidden)))
            fan = hidden
        self.w_sigma = param(rng.normal(0, 0.1, (hidden, 1)))
        self.b_sigma = param(np.full(1, -2.0))  # transmissive start
        self.w_app = param(rng.normal(0, 0.1, (hidden, 3)))
        self.b_app = param(np.zeros(3))

    def __call__(self, q: Tensor, x: Tensor):
        h = x
        for i in range(self.LAYERS):
            scale = ad.add(ad.matmul(q, self.ws[i]), self.bs[i])
            shift = ad.add(ad.matmul(q, self.wh[i]), self.bh[i])
            h = ad.relu(ad.add(ad.mul(ad.add(ad.matmul(h, self.w[i]), self.b[i]), scale), shift))
        sigma = ad.softplus(ad.add(ad.matmul(h, self.w_sigma), self.b_sigma))
        a = ad.sigmoid(ad.add(ad.matmul(h, self.w_app), self.b_app))
        return sigma, a

    def parameters(self):
        out = []
        for i in range(self.LAYERS):
            out += [self.w[i], self.b[i], self.ws[i], self.bs[i], self.wh[i], self.bh[i]]
        return out + [self.w_sigma, self.b_sigma, self.w_app, self.b_app]

    def to_arrays(self) -> dict:
        out = {"dec.meta": np.array([self.dim, self.hidden], dtype=np.float64)}
        for i in range(self.LAYERS):
            for tag, group in (("w", self.w), ("b", self.b), ("ws", self.ws),
                               ("bs", self.bs), ("wh", self.wh), ("bh", self.bh)):
                out[f"dec.{tag}{i}"] = group[i].data
        out["dec.w_sigma"] = self.w_sigma.data
        out["dec.b_sigma"] = self.b_sigma.data
        out["dec.w_app"] = self.w_app.data
        out["dec.b_app"] = self.b_app.data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Decoder":
        dim, hidden = (int(v) for v in arrays["dec.meta"])
        dec = cls(dim=dim, hidden=hidden, rng=np.random.default_rng(0))
        for i in range(cls.LAYERS):
            for tag, group in (("w", dec.w), ("b", dec.b), ("ws", dec.ws),
                               ("bs", dec.bs), ("wh", dec.wh), ("bh", dec.bh)):
                group[i].data = np.array(arrays[f"dec.{tag}{i}"])
        dec.w_sigma.data = np.array(arrays["dec.w_sigma"])
        dec.b_sigma.data = np.array(arrays["dec.b_sigma"])
        dec.w_app.data = np.array(arrays["dec.w_app"])
        dec.b_app.data = np.array(arrays["dec.b_app"])
        return dec


def render_core(m_t: Tensor, support: np.ndarray, pose_xyyaw, dirs_body: np.ndarray,
                grid: GridSpec, samp: RaySamplingSpec, dec: Decoder,
                camera_height: float, ceiling: float = DEFAULT_CEILING,
                jitter: np.ndarray = None):
    """Differentiable ray rendering. pose_xyyaw entries may be Tensors (pose
    tracking) or floats; m_t may be on the tape (training) or constant.

    Returns (color [P,3], depth [P,1], opacity [P,1]) as Tensors.
    """
    P = dirs_body.shape[0]
    S = samp.samples_per_ray
    x0, y0, yaw = (as_tensor(v) for v in pose_xyyaw)
    cos_y, sin_y = ad.cos(yaw), ad.sin(yaw)
    bx = Tensor(dirs_body[:, 0:1])  # [P,1]
    by = Tensor(dirs_body[:, 1:2])
    bz = dirs_body[:, 2:3]
    dwx = ad.sub(ad.mul(bx, cos_y), ad.mul(by, sin_y))
    dwy = ad.add(ad.mul(bx, sin_y), ad.mul(by, cos_y))

    delta = (samp.u_far - samp.u_near) / S
    if jitter is None:
        u = samp.u_near + (np.arange(S) + 0.5) * delta
        u_t = Tensor(np.broadcast_to(u, (P, S)).copy())
    else:
        u_t = Tensor(samp.u_near + (np.arange(S) + jitter) * delta)

    px = ad.add(ad.mul(u_t, dwx), x0)  # [P,S] broadcasting [P,1] along samples
    py = ad.add(ad.mul(u_t, dwy), y0)
    z = camera_height + u_t.data * bz  # heights are pose-independent in SE(2)

    inv = 1.0 / grid.resolution
    gu = ad.add(ad.mul(px, Tensor(inv)), Tensor(grid.center - grid.origin_x * inv))
    gv = ad.add(ad.mul(py, Tensor(inv)), Tensor(grid.center - grid.origin_y * inv))
    coords = concat([reshape(gu, (P * S, 1)), reshape(gv, (P * S, 1))], axis=1)

    q = bilinear_sample_2d(m_t, coords)  # [P*S, D]
    sup = bilinear_sample_2d(Tensor(support.astype(np.float64)[..., None]),
                             Tensor(coords.data))  # constant path
    mask = (sup.data > 0).astype(np.float64)  # [P*S,1]

    frac_u = ad.sub(reshape(gu, (P * S, 1)), Tensor(np.floor(gu.data).reshape(P * S, 1)))
    frac_v = ad.sub(reshape(gv, (P * S, 1)), Tensor(np.floor(gv.data).reshape(P * S, 1)))
    zc = Tensor((z / ceiling).reshape(P * S, 1))
    x_in = concat([frac_u, frac_v, zc], axis=1)

    sigma, a = dec(q, x_in)
    sigma = ad.mul(sigma, Tensor(mask))
    tau = reshape(ad.mul(sigma, Tensor(delta)), (P, S))
    T = ad.exp(ad.neg(cumsum_exclusive(tau, axis=1)))
    alpha = ad.sub(Tensor(1.0), ad.exp(ad.neg(tau)))
    w = ad.mul(T, alpha)  # [P,S]
    wsum = ad.reduce_sum(w, axis=1, keepdims=True)  # [P,1]

    w3 = reshape(w, (P, S, 1))
    color = ad.reduce_sum(ad.mul(w3, reshape(a, (P, S, 3))), axis=1)
    bg = Tensor(np.asarray(samp.background))
    color = ad.add(color, ad.mul(ad.sub(Tensor(1.0), wsum), bg))
    depth = ad.reduce_sum(ad.mul(w, u_t), axis=1, keepdims=True)
    return color, depth, wsum


def support_fraction(grid: LatentGrid, pose: Pose, dirs_body: np.ndarray,
                     samp: RaySamplingSpec, camera_height: float,
                     ceiling: float = DEFAULT_CEILING) -> float:
    """Fraction of ray samples that land on observed map cells (tape-free)."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dwx = c * dirs_body[:, 0:1] - s * dirs_body[:, 1:2]
    dwy = s * dirs_body[:, 0:1] + c * dirs_body[:, 1:2]
    S = samp.samples_per_ray
    delta = (samp.u_far - samp.u_near) / S
    u = samp.u_near + (np.arange(S) + 0.5) * delta
    gx = (pose.x + u * dwx - grid.spec.origin_x) / grid.spec.resolution + grid.spec.center
    gy = (pose.y + u * dwy - grid.spec.origin_y) / grid.spec.resolution + grid.spec.center
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    with no_grad():
        sup = bilinear_sample_2d(Tensor(grid.support().astype(np.float64)[..., None]),
                                 Tensor(coords))
    return float(np.mean(sup.data > 0))


def _check_pixels(intr: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise PixelOutOfBounds(f"pixel list shape {pixels.shape}")
    if ((pixels[:, 0] < 0) | (pixels[:, 0] >= intr.height)
            | (pixels[:, 1] < 0) | (pixels[:, 1] >= intr.width)).any():
        raise PixelOutOfBounds("pixel outside the image")
    return pixels


def render_pixels(grid: LatentGrid, pose: Pose, intr: CameraIntrinsics,
                  pixels, samp: RaySamplingSpec, dec: Decoder,
                  ceiling: float = DEFAULT_CEILING, jitter: np.ndarray = None):
    """Forward-only subset rendering -> (rgb [P,3], depth [P])."""
    pixels = _check_pixels(intr, pixels)
    dirs = pixel_ray_dirs(intr, pixels)
    with no_grad():
        color, depth, _ = render_core(Tensor(grid.m), grid.support(),
                                      (pose.x, pose.y, pose.yaw), dirs, grid.spec,
                                      samp, dec, intr.camera_height, ceiling, jitter)
    return color.data, depth.data[:, 0]


def render_image(grid: LatentGrid, pose: Pose, intr: CameraIntrinsics,
                 samp: RaySamplingSpec, dec: Decoder,
                 ceiling: float = DEFAULT_CEILING, chunk: int = 4096) -> RgbdFrame:
    """Full-frame rendering, row-major pixel order."""
    hh, ww = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    pixels = np.stack([hh.ravel(), ww.ravel()], axis=1)
    rgb = np.zeros((pixels.shape[0], 3))
    depth = np.zeros(pixels.shape[0])
    for lo in range(0, pixels.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        rgb[sl], depth[sl] = render_pixels(grid, pose, intr, pixels[sl], samp, dec, ceiling)
    return RgbdFrame(rgb=rgb.reshape(intr.height, intr.width, 3),
                     depth=depth.reshape(intr.height, intr.width), intr=intr)


def reconstruction_loss(rendered, observed) -> Tensor:
    """Mean absolute error between matching stacks (RGB plus scaled depth)."""
    rendered = as_tensor(rendered)
    observed = as_tensor(observed)
    if rendered.shape != observed.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {observed.shape}")
    return l1_distance(rendered, observed)


# -- training ---------------------------------------------------------------------


@dataclass
class AutoencTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    frames_per_sample: int = 4
    pixels_per_frame: int = 64
    walk_stride: int = 3
    seed: int = 0
    jitter: bool = True
    grid: GridSpec = field(default_factory=GridSpec)
    samp: RaySamplingSpec = field(default_factory=RaySamplingSpec)
    intr: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics.from_hfov(64, 64, 90.0))
    ceiling: float = DEFAULT_CEILING


def valid_pixel_subset(frame: RgbdFrame, count: int, rng: np.random.Generator,
                       min_depth: float = 0.0) -> np.ndarray:
    """[count, 2] (h, w) pixels with a depth return, sampled without replacement.

    min_depth additionally drops returns the quadrature cannot reproduce
    (closer than the near plane).
    """
    hs, ws = np.nonzero(frame.depth > max(0.0, min_depth))
    if len(hs) == 0:
        raise ValueError("frame has no valid depth")
    idx = rng.choice(len(hs), size=min(count, len(hs)), replace=False)
    return np.stack([hs[idx], ws[idx]], axis=1)


def frame_targets(frame: RgbdFrame, pixels: np.ndarray, u_far: float) -> np.ndarray:
    """[P, 4] ground-truth rows: rgb and depth scaled by the far plane."""
    rgb = frame.rgb[pixels[:, 0], pixels[:, 1]]
    d = np.clip(frame.depth[pixels[:, 0], pixels[:, 1]] / u_far, 0.0, 1.0)
    return np.concatenate([rgb, d[:, None]], axis=1)


def render_training_stack(frames, rel_poses, m_t, counts, dec, cfg, pixel_sets,
                          jitter_arrays=None):
    """Rendered [sum P, 4] Tensor for the chosen pixels of every frame."""
    support = counts > 0
    outs = []
    for k, (frame, pose, pixels) in enumerate(zip(frames, rel_poses, pixel_sets)):
        dirs = pixel_ray_dirs(frame.intr, pixels)
        jit = None if jitter_arrays is None else jitter_arrays[k]
        color, depth, _ = render_core(m_t, support, (pose.x, pose.y, pose.yaw), dirs,
                                      cfg.grid, cfg.samp, dec,
                                      frame.intr.camera_height, cfg.ceiling, jit)
        scaled = ad.mul(depth, Tensor(1.0 / cfg.samp.u_far))
        outs.append(concat([color, scaled], axis=1))
    return concat(outs, axis=0)


def autoenc_step(world_frames, rel_poses, enc, dec, cfg, rng):
    """One training step's loss graph; returns (loss Tensor, target ndarray)."""
    m_t, counts = register_batch_t(world_frames, rel_poses, enc, cfg.grid, cfg.ceiling)
    pixel_sets = [valid_pixel_subset(f, cfg.pixels_per_frame, rng, cfg.samp.u_near)
                  for f in world_frames]
    jitters = None
    if cfg.jitter:
        jitters = [rng.uniform(size=(len(px), cfg.samp.samples_per_ray))
                   for px in pixel_sets]
    rendered = render_training_stack(world_frames, rel_poses, m_t, counts, dec, cfg,
                                     pixel_sets, jitters)
    target = np.concatenate([frame_targets(f, px, cfg.samp.u_far)
                             for f, px in zip(world_frames, pixel_sets)], axis=0)
    return reconstruction_loss(rendered, target), target


def sample_training_poses(world, free, grid, rng, count, stride):
    """Poses along a short collision-free random walk (frames overlap heavily).

    The walk turns away from nearby walls so frames never degenerate into
    closeups the near plane cannot represent.
    """
    from .simworld import NoiseModel, forward_clearance, sample_free_pose, step

    start = sample_free_pose(world, free, grid, rng)
    poses = [start]
    pose = start
    nm = NoiseModel.off()
    turn_side = None
    while len(poses) < count:
        for _ in range(stride):
            if forward_clearance(world, pose) < 0.5:
                if turn_side is None:
                    turn_side = "TurnLeft" if rng.uniform() < 0.5 else "TurnRight"
                action = turn_side  # commit to one side until clear again
            else:
                turn_side = None
                r = rng.uniform()
                action = "Forward" if r < 0.7 else ("TurnLeft" if r < 0.85 else "TurnRight")
            pose, _ = step(world, pose, action, nm)
        poses.append(pose)
    return poses


def train_autoencoder(worlds: list, enc: Encoder, dec: Decoder,
                      cfg: AutoencTrainConfig = None, callback=None):
    """Joint encoder/decoder training on random scenes; returns per-step losses."""
    from .simworld import rasterize_occupancy

    cfg = cfg or AutoencTrainConfig()
    rng = substream(cfg.seed, "train-autoenc")
    caches = [(w, rasterize_occupancy(w, cfg.grid)) for w in worlds]
    opt = Adam(list(enc.parameters()) + list(dec.parameters()), lr=cfg.lr)
    losses = []
    for step_i in range(cfg.steps):
        world, free = caches[int(rng.integers(0, len(caches)))]
        poses = sample_training_poses(world, free, cfg.grid, rng,
                                      cfg.frames_per_sample, cfg.walk_stride)
        frames = [render_rgbd(world, p, cfg.intr) for p in poses]
        rel = [relative_pose(poses[0], p) for p in poses]
        loss, _ = autoenc_step(frames, rel, enc, dec, cfg, rng)
        opt.zero_grad()
        backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if callback is not None:
            callback(step_i, losses[-1])
    return losses


def reconstruction_eval(world, poses, enc, dec, cfg: AutoencTrainConfig,
                        pixels_per_frame: int = 256, seed: int = 7) -> float:
    """Deterministic held-out reconstruction error (mean abs, rgb + scaled depth)."""
    rng = substream(seed, "val-pixels")
    frames = [render_rgbd(world, p, cfg.intr) for p in poses]
    rel = [relative_pose(poses[0], p) for p in poses]
    with no_grad():
        grid, _ = _registered(frames, rel, enc, cfg)
        pixel_sets = [valid_pixel_subset(f, pixels_per_frame, rng) for f in frames]
        rendered = render_training_stack(frames, rel, Tensor(grid.m), grid.n, dec,
                                         cfg, pixel_sets)
        target = np.concatenate([frame_targets(f, px, cfg.samp.u_far)
                                 for f, px in zip(frames, pixel_sets)], axis=0)
        return float(reconstruction_loss(rendered, target).data)


def _registered(frames, rel_poses, enc, cfg):
    from .latent_map import LatentGrid, integrate, register

    grid = LatentGrid.empty(cfg.grid, enc.dim)
    dropped = 0
    for frame, pose in zip(frames, rel_poses):
        local, d = register(frame, pose, enc, cfg.grid, cfg.ceiling)
        integrate(grid, local)
        dropped += d
    return grid, dropped
