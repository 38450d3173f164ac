"""Episode generation protocols.

Training and test splits draw object sizes from disjoint ranges; the
test sizes sit inside the gap of the training distribution, so learned
size handling is interpolation, never memorization.  All randomness
flows from one seed through per-episode child generators, making every
dataset byte-reproducible from (seed, index) alone.
"""

from __future__ import annotations

import numpy as np

from voxsim import geometry as geo
from voxsim.errors import ConfigError
from voxsim.sim.bodies import BOX, CYLINDER, spawn_bodies
from voxsim.sim.episodes import Episode
from voxsim.sim.fall import FallSim
from voxsim.sim.push import PushSim
from voxsim.sim.render import PUSHER_HALF_HEIGHT, PUSHER_RADIUS, render_scene

SIZE_RANGES_TRAIN = ((0.060, 0.078), (0.090, 0.112))
SIZE_RANGES_TEST = ((0.080, 0.088),)

CAMERA_AZIMUTHS_DEG = (90.0, 210.0, 330.0)
CAMERA_ELEVATION_DEG = 40.0
CAMERA_DISTANCE = 1.0
CAMERA_TARGET = (0.0, 0.0, 0.1)
AZIMUTH_JITTER_DEG = 10.0
ELEVATION_JITTER_DEG = 5.0
DISTANCE_JITTER = 0.05

PUSH_STEPS = 5
ACTION_LOW = 0.03
ACTION_HIGH = 0.06
FIRST_AIM_JITTER = np.deg2rad(45.0)
DRIFT_JITTER = np.deg2rad(30.0)
RANDOM_WALK_FRACTION = 0.15

FALL_STEPS = 10
FALL_DT = 0.04
DROP_LOW = 0.15
DROP_HIGH = 0.30


def size_ranges(split):
    if split == "train":
        return SIZE_RANGES_TRAIN
    if split == "test":
        return SIZE_RANGES_TEST
    raise ConfigError(f"unknown split: {split!r}")


def sample_size(rng, ranges):
    """Uniform over a union of intervals, weighted by interval length."""
    lengths = np.array([hi - lo for lo, hi in ranges])
    idx = int(rng.choice(len(ranges), p=lengths / lengths.sum()))
    lo, hi = ranges[idx]
    return float(rng.uniform(lo, hi))


def default_cameras(rng, n_frames, n_views=3):
    """Ring cameras with fresh per-frame pose jitter.

    Returns (origins [T+1,V,3], rots [T+1,V,3,3]).
    """
    origins = np.zeros((n_frames, n_views, 3))
    rots = np.zeros((n_frames, n_views, 3, 3))
    for t in range(n_frames):
        for v in range(n_views):
            az = np.deg2rad(CAMERA_AZIMUTHS_DEG[v % len(CAMERA_AZIMUTHS_DEG)]
                            + rng.uniform(-AZIMUTH_JITTER_DEG, AZIMUTH_JITTER_DEG))
            el = np.deg2rad(CAMERA_ELEVATION_DEG
                            + rng.uniform(-ELEVATION_JITTER_DEG, ELEVATION_JITTER_DEG))
            dist = CAMERA_DISTANCE + rng.uniform(-DISTANCE_JITTER, DISTANCE_JITTER)
            pose = geo.ring_camera(az, el, dist, CAMERA_TARGET)
            origins[t, v] = pose.origin
            rots[t, v] = pose.rot
    return origins, rots


def _render_frames(bodies_per_frame, pusher_per_frame, origins, rots, intr):
    t1, v = origins.shape[:2]
    depth = np.zeros((t1, v, intr.height, intr.width), dtype=np.float32)
    rgb = np.zeros((t1, v, intr.height, intr.width, 3), dtype=np.uint8)
    for t in range(t1):
        for view in range(v):
            pose = geo.CameraPose(origins[t, view], rots[t, view])
            d, c = render_scene(bodies_per_frame[t], intr, pose,
                                pusher_xy=pusher_per_frame[t])
            depth[t, view] = d.astype(np.float32)
            rgb[t, view] = np.round(c * 255.0).astype(np.uint8)
    return depth, rgb


def _sample_push_actions(rng, pusher_xy, target_xy):
    """Action displacements: aimed first step, drifting heading after."""
    if rng.uniform() < RANDOM_WALK_FRACTION:
        headings = rng.uniform(-np.pi, np.pi, size=PUSH_STEPS)
    else:
        aim = np.arctan2(target_xy[1] - pusher_xy[1], target_xy[0] - pusher_xy[0])
        headings = np.empty(PUSH_STEPS)
        headings[0] = aim + rng.uniform(-FIRST_AIM_JITTER, FIRST_AIM_JITTER)
        for t in range(1, PUSH_STEPS):
            headings[t] = headings[t - 1] + rng.uniform(-DRIFT_JITTER, DRIFT_JITTER)
    mags = rng.uniform(ACTION_LOW, ACTION_HIGH, size=PUSH_STEPS)
    actions = np.zeros((PUSH_STEPS, 3))
    actions[:, 0] = mags * np.cos(headings)
    actions[:, 1] = mags * np.sin(headings)
    return actions


def _spawn_pusher(rng, target):
    """Rod placed just clear of the target body, random bearing."""
    bearing = rng.uniform(-np.pi, np.pi)
    gap = rng.uniform(0.005, 0.02)
    dist = target.footprint_radius() + PUSHER_RADIUS + gap
    return target.pos[:2] + dist * np.array([np.cos(bearing), np.sin(bearing)])


def generate_episode(seed, split="train", protocol="push", intr=None, n_views=3):
    """Simulate and render one episode deterministically from its seed."""
    if intr is None:
        intr = geo.CameraIntrinsics.centered()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    ranges = size_ranges(split)

    if protocol == "push":
        n_bodies = int(rng.integers(1, 3))
        steps = PUSH_STEPS
    elif protocol == "fall":
        n_bodies = int(rng.integers(2, 5))
        steps = FALL_STEPS
    else:
        raise ConfigError(f"unknown protocol: {protocol!r}")

    kinds = [BOX if rng.uniform() < 0.5 else CYLINDER for _ in range(n_bodies)]
    sizes = [sample_size(rng, ranges) for _ in range(n_bodies)]
    bodies = spawn_bodies(rng, kinds, sizes)

    frames = [( [b.copy() for b in bodies] )]
    poses = np.zeros((steps + 1, n_bodies, 7))
    pusher = np.full((steps + 1, 3), np.nan)
    actions = np.zeros((steps, 3))

    if protocol == "push":
        target_idx = int(rng.integers(0, n_bodies))
        rod = _spawn_pusher(rng, bodies[target_idx])
        actions = _sample_push_actions(rng, rod, bodies[target_idx].pos[:2])
        sim = PushSim(bodies, rod)
        poses[0] = sim.poses()
        pusher[0] = (sim.pusher[0], sim.pusher[1], PUSHER_HALF_HEIGHT)
        for t in range(steps):
            sim.step(actions[t, :2])
            poses[t + 1] = sim.poses()
            pusher[t + 1] = (sim.pusher[0], sim.pusher[1], PUSHER_HALF_HEIGHT)
            frames.append([b.copy() for b in sim.bodies])
    else:
        for b in bodies:
            drop = rng.uniform(DROP_LOW, DROP_HIGH)
            b.pos[2] = b.rest_z() + drop
        frames[0] = [b.copy() for b in bodies]
        sim = FallSim(bodies, dt=FALL_DT)
        poses[0] = sim.poses()
        for t in range(steps):
            sim.step()
            poses[t + 1] = sim.poses()
            frames.append([b.copy() for b in sim.bodies])

    cam_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, 0x0CA3])))
    origins, rots = default_cameras(cam_rng, steps + 1, n_views)
    pusher_track = [None if not np.isfinite(pusher[t, 0]) else pusher[t, :2]
                    for t in range(steps + 1)]
    depth, rgb = _render_frames(frames, pusher_track, origins, rots, intr)

    colors = np.stack([b.color for b in bodies])
    return Episode(protocol, kinds, sizes, colors, poses, pusher, actions,
                   origins, rots, depth, rgb)


def generate_dataset(n_episodes, seed, split="train", protocol="push", n_views=3):
    """Generate a list of episodes from consecutive child seeds."""
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_episodes)
    episodes = []
    for child in children:
        ep_seed = int(child.generate_state(1, np.uint64)[0])
        episodes.append(generate_episode(ep_seed, split=split,
                                         protocol=protocol, n_views=n_views))
    return episodes


def dataset_manifest(episodes, seed, split, protocol):
    """Summary sidecar for a generated dataset, stable across runs."""
    return {
        "episodes": len(episodes),
        "seed": int(seed),
        "split": split,
        "protocol": protocol,
        "views": int(episodes[0].n_views) if episodes else 0,
        "height": int(episodes[0].depth.shape[2]) if episodes else 0,
        "width": int(episodes[0].depth.shape[3]) if episodes else 0,
        "steps": int(episodes[0].n_steps) if episodes else 0,
        "bodies_total": int(sum(ep.n_bodies for ep in episodes)),
    }
