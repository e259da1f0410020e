"""Helpers shared by tracking / localization / navigation tests."""

import numpy as np

from latentnav.geometry import GridSpec, Pose, relative_pose
from latentnav.latent_map import LatentGrid, integrate, register
from latentnav.simworld import (FORWARD, TURN_LEFT, TURN_RIGHT, NoiseModel,
                                World, forward_clearance, rasterize_occupancy,
                                render_rgbd, sample_free_pose, step)


def rollout(world: World, start: Pose, n_steps: int, noise: NoiseModel,
            rng: np.random.Generator, intr, forward_bias: float = 0.6):
    """Wall-avoiding random-walk rollout -> (frames, odoms, true_poses).

    Frames are rendered at the true (noise-actuated) poses; odoms are the noisy
    body-frame readings between consecutive frames.
    """
    poses = [start]
    frames = [render_rgbd(world, start, intr)]
    odoms = []
    pose = start
    turn_side = None
    for _ in range(n_steps):
        if forward_clearance(world, pose) < 0.5:
            if turn_side is None:
                turn_side = TURN_LEFT if rng.uniform() < 0.5 else TURN_RIGHT
            action = turn_side
        else:
            turn_side = None
            r = rng.uniform()
            if r < forward_bias:
                action = FORWARD
            elif r < forward_bias + (1 - forward_bias) / 2:
                action = TURN_LEFT
            else:
                action = TURN_RIGHT
        pose, od = step(world, pose, action, noise)
        poses.append(pose)
        frames.append(render_rgbd(world, pose, intr))
        odoms.append(od)
    return frames, odoms, poses


def build_map(frames, poses, enc, spec: GridSpec, ceiling: float = 2.0):
    """Register frames at poses relative to the first one -> (grid, rel poses)."""
    rel = [relative_pose(poses[0], p) for p in poses]
    grid = LatentGrid.empty(spec, enc.dim)
    for frame, p in zip(frames, rel):
        local, _ = register(frame, p, enc, spec, ceiling)
        integrate(grid, local)
    return grid, rel


def free_start(world: World, spec: GridSpec, rng: np.random.Generator) -> Pose:
    free = rasterize_occupancy(world, spec)
    return sample_free_pose(world, free, spec, rng)
