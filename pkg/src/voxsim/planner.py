"""Random-shooting model predictive control for pushing.

Each control step samples random action sequences, scores them by
rolling the dynamics model forward, executes the first action of the
cheapest sequence in the real simulator, then re-observes.  Two scene
backends share the loop: LearnedScene perceives through rendered views
(lift, detect, track, crop) and predicts with a trained motion model;
OracleScene reads the true state and scores with the simulator itself,
an upper bound that proves a task is solvable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from voxsim import dynamics as dyn
from voxsim import geometry as geo
from voxsim.detector import Detector, crop_object
from voxsim.errors import ConfigError
from voxsim.lift import LiftEncoder, fuse_views, lift_view
from voxsim.sim.bodies import BOX, CYLINDER, Body, spawn_bodies
from voxsim.sim.generate import default_cameras, sample_size, size_ranges
from voxsim.sim.push import PushSim
from voxsim.sim.render import PUSHER_HALF_HEIGHT, PUSHER_RADIUS, render_scene

TRACK_RADIUS = 0.08  # a tracked object farther than this from every detection is lost


@dataclass
class PlannerConfig:
    """Random-shooting MPC settings."""

    samples: int = 30
    seq_len: int = 10
    horizon: int = 1
    action_low: float = 0.03
    action_high: float = 0.06
    success_radius: float = 0.04
    max_steps: int = 10
    threads: int = 1
    obstacle_penalty: float = 0.0

    def __post_init__(self):
        if int(self.samples) < 1:
            raise ConfigError("need at least one action sequence")
        if int(self.horizon) < 1 or int(self.horizon) > int(self.seq_len):
            raise ConfigError("planning horizon must be in [1, seq_len]")
        if not 0.0 < self.action_low <= self.action_high:
            raise ConfigError("action magnitude range must be positive")
        if int(self.max_steps) < 0:
            raise ConfigError("max episode steps cannot be negative")
        if int(self.threads) < 1:
            raise ConfigError("thread count must be at least 1")
        self.samples = int(self.samples)
        self.seq_len = int(self.seq_len)
        self.horizon = int(self.horizon)
        self.max_steps = int(self.max_steps)
        self.threads = int(self.threads)


@dataclass
class Goal:
    """Push the indexed object to the target world position."""

    object_index: int
    target: np.ndarray

    def __post_init__(self):
        self.object_index = int(self.object_index)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)


def sample_action_sequences(config, rng):
    """[samples, seq_len, 3] planar pushes, magnitude in the config range."""
    theta = rng.uniform(-np.pi, np.pi, (config.samples, config.seq_len))
    mag = rng.uniform(config.action_low, config.action_high,
                      (config.samples, config.seq_len))
    seqs = np.zeros((config.samples, config.seq_len, 3))
    seqs[:, :, 0] = mag * np.cos(theta)
    seqs[:, :, 1] = mag * np.sin(theta)
    return seqs


def choose_action(costs):
    """Index of the cheapest sequence; ties go to the lowest index."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 1 or costs.size == 0:
        raise ConfigError("costs must be a nonempty vector")
    return int(np.argmin(costs))


# ---------------------------------------------------------------------------
# the true world

class PushOracle:
    """Owns the real simulator; executes actions and renders views."""

    def __init__(self, bodies, pusher_xy, intr=None, n_views=3, cam_seed=0):
        self.intr = intr if intr is not None else geo.CameraIntrinsics.centered()
        self.sim = PushSim([b.copy() for b in bodies], pusher_xy)
        cam_rng = np.random.default_rng(cam_seed)
        origins, rots = default_cameras(cam_rng, 1, n_views)
        self.cam_origins = origins[0]
        self.cam_rots = rots[0]

    def observe(self):
        """Render the current state -> (depth, rgb [0,1], pose) triples."""
        views = []
        for v in range(self.cam_origins.shape[0]):
            pose = geo.CameraPose(self.cam_origins[v], self.cam_rots[v])
            depth, rgb = render_scene(self.sim.bodies, self.intr, pose,
                                      pusher_xy=self.sim.pusher)
            views.append((depth, rgb, pose))
        return views

    def execute(self, action_xy):
        self.sim.step(np.asarray(action_xy, dtype=np.float64)[:2])

    def positions(self):
        return np.stack([b.pos for b in self.sim.bodies])

    def pusher_position(self):
        return np.array([self.sim.pusher[0], self.sim.pusher[1],
                         PUSHER_HALF_HEIGHT])

    def rollout(self, actions):
        """Simulate a copy through actions [L, >=2] -> positions [N, 3]."""
        sim = PushSim([b.copy() for b in self.sim.bodies], self.sim.pusher)
        for a in np.asarray(actions, dtype=np.float64):
            sim.step(a[:2])
        return np.stack([b.pos for b in sim.bodies])


# ---------------------------------------------------------------------------
# scene backends

def _goal_cost(positions, goal, obstacle_penalty=0.0, displacements=None):
    cost = float(np.linalg.norm(positions[goal.object_index] - goal.target))
    if obstacle_penalty > 0.0 and displacements is not None:
        others = [np.linalg.norm(displacements[i])
                  for i in range(displacements.shape[0])
                  if i != goal.object_index]
        if others:
            cost += obstacle_penalty * float(np.sum(others))
    return cost


class OracleScene:
    """Scores action sequences with the true simulator (planning ceiling)."""

    def __init__(self):
        self._oracle = None

    def start(self, oracle, goal):
        self._oracle = oracle
        n = len(oracle.sim.bodies)
        if not 0 <= goal.object_index < n:
            raise ConfigError(f"goal object {goal.object_index} of {n}")
        return True

    def refresh(self, oracle, goal):
        return True

    def score(self, goal, sequences, horizon, config):
        start = self._oracle.positions()

        def one(seq):
            pos = self._oracle.rollout(seq[:horizon])
            return _goal_cost(pos, goal, config.obstacle_penalty, pos - start)

        return _map_sequences(one, sequences, config.threads)


class LearnedScene:
    """Perceives through rendered views; predicts with a trained model.

    Objects are re-detected after every executed action and matched to
    their tracks by nearest centroid; losing the goal object ends the
    episode as a failure.
    """

    def __init__(self, model, lift_params, det_params, spec, intr=None):
        self.model = model
        self.encoder = LiftEncoder(lift_params)
        self.detector = Detector(det_params)
        self.spec = spec
        self.intr = intr if intr is not None else geo.CameraIntrinsics.centered()
        self.tracks = None
        self.window = None
        self.state = None

    def _perceive(self, oracle):
        raws = [lift_view(d, c, self.intr, pose, self.spec)
                for d, c, pose in oracle.observe()]
        grid = self.encoder(fuse_views(raws)).data
        found = self.detector.detect(grid, self.spec)
        return grid, found["centroids"]

    def _match(self, centroids):
        """Nearest-detection update of every track; None if any is lost."""
        updated = np.empty_like(self.tracks)
        for i, prev in enumerate(self.tracks):
            if centroids.shape[0] == 0:
                return None
            d = np.linalg.norm(centroids - prev, axis=1)
            j = int(np.argmin(d))
            if d[j] > TRACK_RADIUS:
                return None
            updated[i] = centroids[j]
        return updated

    def _rebuild(self, oracle, grid):
        n = self.tracks.shape[0]
        crops = None
        if self.model.variant == "ours":
            crops = np.stack([crop_object(grid, self.tracks[i],
                                          self.spec).data
                              for i in range(n)])
        self.window = dyn.WindowBatch(
            [n],
            self.tracks.astype(np.float64),
            np.tile(geo.quat_identity(), (n, 1)),
            oracle.pusher_position()[None],
            crops=crops)
        self.state = dyn.init_state(self.model, self.window)

    def start(self, oracle, goal):
        grid, centroids = self._perceive(oracle)
        true0 = oracle.positions()
        if centroids.shape[0] == 0:
            return False
        # initial binding: the user designates objects at their start poses
        self.tracks = np.empty((true0.shape[0], 3))
        for i, pos in enumerate(true0):
            d = np.linalg.norm(centroids - pos, axis=1)
            j = int(np.argmin(d))
            if d[j] > TRACK_RADIUS:
                return False
            self.tracks[i] = centroids[j]
        self._rebuild(oracle, grid)
        return True

    def refresh(self, oracle, goal):
        grid, centroids = self._perceive(oracle)
        updated = self._match(centroids)
        if updated is None:
            return False
        self.tracks = updated
        self._rebuild(oracle, grid)
        return True

    def score(self, goal, sequences, horizon, config):
        return score_sequences(self.model, self.window, self.state, goal,
                               sequences, horizon, config)


def score_sequences(model, window, state, goal, sequences, horizon, config):
    """Cost of each action sequence under the model: goal distance of
    the designated object after `horizon` predicted steps.

    The goal is subtracted from the start positions before the
    predicted displacement is added, so a common shift of scene and
    goal cancels exactly and the costs are translation invariant
    whenever the model's predictions are.
    """
    base = np.asarray(window.p0, dtype=np.float64) - goal.target
    if not 0 <= goal.object_index < base.shape[0]:
        raise ConfigError(f"goal object {goal.object_index} out of range")

    def one(seq):
        states, _ = dyn.unroll(model, window, seq[:horizon], state=state)
        disp = np.asarray(states[-1].p_hat.data, dtype=np.float64)
        cost = float(np.linalg.norm(base[goal.object_index]
                                    + disp[goal.object_index]))
        if config.obstacle_penalty > 0.0:
            others = np.linalg.norm(disp, axis=1)
            cost += config.obstacle_penalty * float(
                others.sum() - others[goal.object_index])
        return cost

    return _map_sequences(one, sequences, config.threads)


def _map_sequences(fn, sequences, threads):
    """Score each sequence, optionally across threads.

    Every sequence is scored by an independent forward pass, so the
    thread split cannot change any float and parallel selection matches
    serial selection exactly.
    """
    if threads <= 1:
        return np.array([fn(seq) for seq in sequences])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(fn, sequences)))


# ---------------------------------------------------------------------------
# the control loop

def mpc_episode(scene, goal, config, oracle, rng):
    """Closed-loop MPC until success, loss of tracking, or max steps.

    Success is the true goal-object position landing within the success
    radius.  Returns an outcome record with the executed step count,
    final distance, and a failure reason when tracking is lost.
    """
    if not scene.start(oracle, goal):
        d0 = float(np.linalg.norm(
            oracle.positions()[goal.object_index] - goal.target))
        return {"success": False, "steps": 0, "final_distance": d0,
                "reason": "lost"}
    steps = 0
    reason = ""
    fresh = True  # start() just perceived the scene
    for _ in range(config.max_steps):
        dist = float(np.linalg.norm(
            oracle.positions()[goal.object_index] - goal.target))
        if dist <= config.success_radius:
            break
        if not fresh and not scene.refresh(oracle, goal):
            reason = "lost"
            break
        sequences = sample_action_sequences(config, rng)
        costs = scene.score(goal, sequences, config.horizon, config)
        best = choose_action(costs)
        oracle.execute(sequences[best, 0, :2])
        steps += 1
        fresh = False
    final = float(np.linalg.norm(
        oracle.positions()[goal.object_index] - goal.target))
    success = final <= config.success_radius and reason == ""
    out = {"success": bool(success), "steps": steps, "final_distance": final}
    if reason:
        out["reason"] = reason
    return out


# ---------------------------------------------------------------------------
# benchmark episodes

GOAL_RANGE = (0.05, 0.25)
OBSTACLE_GOAL_RANGE = (0.24, 0.40)
WORKSPACE_XY = 0.20  # |goal xy| bound, inside the grid with margin


def benchmark_episode(seed, task="push"):
    """Deterministic benchmark scene -> (bodies, pusher_xy, goal).

    The pusher starts on the far side of the goal object so pushing
    toward the goal is geometrically possible; obstacle tasks interpose
    a second body between the object and a farther goal.
    """
    if task not in ("push", "obstacle"):
        raise ConfigError(f"unknown benchmark task: {task!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    ranges = size_ranges("train")
    n_bodies = int(rng.integers(1, 3)) if task == "push" else 1
    kinds = [BOX if rng.uniform() < 0.5 else CYLINDER for _ in range(n_bodies)]
    sizes = [sample_size(rng, ranges) for _ in range(n_bodies)]
    bodies = spawn_bodies(rng, kinds, sizes)
    target_idx = int(rng.integers(0, n_bodies))
    obj = bodies[target_idx]
    lo, hi = GOAL_RANGE if task == "push" else OBSTACLE_GOAL_RANGE
    bound = WORKSPACE_XY if task == "push" else 0.26
    for _ in range(200):
        bearing = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(lo, hi)
        target_xy = obj.pos[:2] + dist * np.array([np.cos(bearing),
                                                   np.sin(bearing)])
        if np.all(np.abs(target_xy) <= bound):
            break
    goal = Goal(target_idx, np.array([target_xy[0], target_xy[1], obj.pos[2]]))
    if task == "obstacle":
        kind = BOX if rng.uniform() < 0.5 else CYLINDER
        size = sample_size(rng, ranges)
        mid = 0.5 * (obj.pos[:2] + target_xy)
        color = rng.uniform(0.2, 0.9, size=3)
        bodies.append(Body(kind, size, color,
                           [mid[0], mid[1], size / 2.0],
                           rng.uniform(-np.pi, np.pi) if kind == BOX else 0.0))
    away = obj.pos[:2] - target_xy
    away = away / max(np.linalg.norm(away), 1e-9)
    gap = rng.uniform(0.005, 0.02)
    pusher_xy = obj.pos[:2] + (obj.footprint_radius() + PUSHER_RADIUS
                               + gap) * away
    return bodies, pusher_xy, goal


def run_benchmark(config, n_episodes, seed, scene_factory, task="push",
                  intr=None):
    """Seeded MPC benchmark -> report dict with per-episode outcomes.

    scene_factory() builds a fresh scene backend per episode.  n = 0
    yields an empty report with the rate flagged as undefined (None).
    """
    episodes = []
    root = np.random.SeedSequence(seed)
    children = root.spawn(int(n_episodes))
    for i, child in enumerate(children):
        ep_seed = int(child.generate_state(1, np.uint64)[0])
        bodies, pusher_xy, goal = benchmark_episode(ep_seed, task)
        oracle = PushOracle(bodies, pusher_xy, intr=intr,
                            cam_seed=ep_seed ^ 0xC0FFEE)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([ep_seed, 0x9A4])))
        outcome = mpc_episode(scene_factory(), goal, config, oracle, rng)
        outcome["seed"] = ep_seed
        episodes.append(outcome)
    rate = (float(np.mean([e["success"] for e in episodes]))
            if episodes else None)
    return {"task": task, "episodes": episodes, "success_rate": rate,
            "n": len(episodes)}


def benchmark_report(report):
    """Stable text report: one line per episode plus a summary line."""
    lines = ["seed steps final_distance success reason"]
    for e in report["episodes"]:
        lines.append(f"{e['seed']} {e['steps']} {e['final_distance']:.6f} "
                     f"{int(e['success'])} {e.get('reason', '-')}")
    if report["success_rate"] is None:
        lines.append("success_rate undefined (no episodes)")
    else:
        lines.append(f"success_rate {report['success_rate']:.4f} "
                     f"over {report['n']} episodes")
    return "\n".join(lines) + "\n"
