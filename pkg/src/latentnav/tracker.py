"""Camera tracking: refine a noisy odometry-predicted pose by gradient descent
on the photometric error between the observed frame and the rendered map.

The optimizer works on an additive world-frame delta (dx, dy, dyaw) starting
at zero, samples a small pixel subset of the frame, and keeps the best iterate
it saw, so the accepted pose never scores worse than the initial guess.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, no_grad, param
from .geometry import GridSpec, Pose, compose, pixel_ray_dirs, relative_pose
from .latent_map import DEFAULT_CEILING, Encoder, LatentGrid, integrate, register
from .renderer import (Decoder, RaySamplingSpec,
                       reconstruction_loss, render_core, support_fraction,
                       valid_pixel_subset)
from .rng import substream
from .simworld import RgbdFrame


class NoSupport(RuntimeError):
    """The map has no observed cells along the guess frustum."""


@dataclass(frozen=True)
class TrackConfig:
    pixel_subset_size: int = 100
    iterations: int = 20
    lr: float = 0.01
    tol: float = 1e-6  # stop when the loss moves less than this between iterates
    grad_floor: float = 1e-8

    def __post_init__(self):
        if min(self.pixel_subset_size, self.iterations, self.lr, self.tol,
               self.grad_floor) <= 0:
            raise ValueError("all tracking parameters must be positive")


def _subset_loss(grid_m: Tensor, support: np.ndarray, spec: GridSpec, base: Pose,
                 deltas, dirs: np.ndarray, target: np.ndarray,
                 samp: RaySamplingSpec, dec: Decoder, camera_height: float,
                 ceiling: float) -> Tensor:
    dx, dy, dyaw = (ad.as_tensor(d) for d in deltas)
    x0 = ad.add(Tensor(np.asarray(base.x)), dx)
    y0 = ad.add(Tensor(np.asarray(base.y)), dy)
    yaw = ad.add(Tensor(np.asarray(base.yaw)), dyaw)
    # Color only: rendered depth carries a small systematic near-bias (weights
    # concentrate at the front of the opacity ridge) that training tolerates
    # but which would drag the pose minimizer backward off the true pose.
    color, _, _ = render_core(grid_m, support, (x0, y0, yaw), dirs, spec,
                              samp, dec, camera_height, ceiling)
    return reconstruction_loss(color, target)


def track(grid: LatentGrid, pose_guess: Pose, frame: RgbdFrame, dec: Decoder,
          cfg: TrackConfig = TrackConfig(), samp: RaySamplingSpec = None,
          ceiling: float = DEFAULT_CEILING, rng: np.random.Generator = None):
    """Refine pose_guess photometrically; returns (pose, best loss, iterations).

    Raises NoSupport when no ray sample touches an observed cell, so the caller
    can fall back to raw odometry.
    """
    samp = samp if samp is not None else RaySamplingSpec()
    rng = rng if rng is not None else substream(0, "track-pixels")
    pixels = valid_pixel_subset(frame, cfg.pixel_subset_size, rng, samp.u_near)
    dirs = pixel_ray_dirs(frame.intr, pixels)
    if support_fraction(grid, pose_guess, dirs, samp, frame.intr.camera_height,
                        ceiling) == 0.0:
        raise NoSupport("no observed cells in the guess frustum")
    target = frame.rgb[pixels[:, 0], pixels[:, 1]]

    m_t = Tensor(grid.m)
    support = grid.support()
    deltas = tuple(param(np.array(0.0)) for _ in range(3))
    opt = Adam(list(deltas), lr=cfg.lr)
    best_loss, best = math.inf, (0.0, 0.0, 0.0)
    prev = None
    used = 0
    for k in range(cfg.iterations):
        loss = _subset_loss(m_t, support, grid.spec, pose_guess, deltas, dirs,
                            target, samp, dec, frame.intr.camera_height, ceiling)
        lval = float(loss.data)
        if lval < best_loss:
            best_loss, best = lval, tuple(float(d.data) for d in deltas)
        opt.zero_grad()
        backward(loss)
        if k == 0:
            gnorm = math.sqrt(sum(float(d.grad) ** 2 for d in deltas))
            if gnorm < cfg.grad_floor:
                return pose_guess, lval, 0
        used = k + 1
        opt.step()
        if prev is not None and abs(prev - lval) < cfg.tol:
            break
        prev = lval
    # the loop scores iterates before stepping; score the last step too
    with no_grad():
        loss = _subset_loss(m_t, support, grid.spec, pose_guess, deltas, dirs,
                            target, samp, dec, frame.intr.camera_height, ceiling)
    if float(loss.data) < best_loss:
        best_loss, best = float(loss.data), tuple(float(d.data) for d in deltas)
    refined = Pose(pose_guess.x + best[0], pose_guess.y + best[1],
                   pose_guess.yaw + best[2])
    return refined, best_loss, used


@dataclass
class TrajectoryResult:
    estimates: list
    ate: float
    mean_iterations: float
    fallbacks: int


def ate_rmse(estimates, truth) -> float:
    """Root mean squared position error after expressing truth relative to its
    own first pose (the estimate stream starts at the origin by construction)."""
    rel = [relative_pose(truth[0], p) for p in truth]
    if len(rel) != len(estimates):
        raise ValueError(f"{len(estimates)} estimates vs {len(truth)} truth poses")
    d2 = [(e.x - r.x) ** 2 + (e.y - r.y) ** 2 for e, r in zip(estimates, rel)]
    return math.sqrt(sum(d2) / len(d2))


def track_trajectory(frames, odoms, enc: Encoder, dec: Decoder,
                     cfg: TrackConfig = TrackConfig(), samp: RaySamplingSpec = None,
                     spec: GridSpec = None, ceiling: float = DEFAULT_CEILING,
                     enabled: bool = True, truth=None, seed: int = 0) -> TrajectoryResult:
    """Run the track-then-map loop over a frame + odometry stream.

    odoms[t] is the body-frame delta from frame t to frame t+1. The first frame
    defines the origin. With tracking disabled the estimates are the raw
    cumulated odometry and the map is not built.
    """
    if len(odoms) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} odometry "
                         f"readings, got {len(odoms)}")
    samp = samp if samp is not None else RaySamplingSpec()
    spec = spec if spec is not None else GridSpec()
    estimates = [Pose(0.0, 0.0, 0.0)]
    grid = LatentGrid.empty(spec, enc.dim)
    if enabled:
        local, _ = register(frames[0], estimates[0], enc, spec, ceiling)
        integrate(grid, local)
    total_iters = 0
    fallbacks = 0
    for t, (frame, od) in enumerate(zip(frames[1:], odoms), start=1):
        predicted = compose(estimates[-1], od)
        if enabled:
            try:
                refined, _, used = track(grid, predicted, frame, dec, cfg, samp,
                                         ceiling, rng=substream(seed, "track", str(t)))
                total_iters += used
            except NoSupport:
                refined, fallbacks = predicted, fallbacks + 1
            estimates.append(refined)
            local, _ = register(frame, refined, enc, spec, ceiling)
            integrate(grid, local)
        else:
            estimates.append(predicted)
    ate = ate_rmse(estimates, truth) if truth is not None else float("nan")
    return TrajectoryResult(estimates=estimates, ate=ate,
                            mean_iterations=total_iters / max(len(odoms), 1),
                            fallbacks=fallbacks)
