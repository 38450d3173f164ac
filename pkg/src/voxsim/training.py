"""Dataset assembly and training loops for the learned components.

Dynamics windows come straight from simulated episodes: object crops
are cut from the encoded scene grid of the first frame, ground truth
pose deltas from consecutive simulator poses.  Training is forward
unrolled with no teacher forcing: the model consumes its own cumulative
poses while each step's predicted deltas are penalized against the
ground truth step deltas, and the error backpropagates through time.

The renderer trains the lift encoder and render head jointly by
regressing a held-out view; the detector trains on encoded scene grids
against analytic body geometry.  Every loop is driven by one seed and
is bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxsim import dynamics as dyn
from voxsim import geometry as geo
from voxsim import tensor as T
from voxsim.detector import Detector, crop_object, detection_loss, match_detections
from voxsim.errors import ConfigError, DataError, NumericError, ShapeError
from voxsim.lift import GRID_CHANNELS, GridSpec, LiftEncoder, fuse_views, lift_view
from voxsim.renderer import RENDER_SIZE, RenderHead, downsample_rgb, render_view, view_loss
from voxsim.sim.bodies import Body, contains_points


@dataclass
class TrainConfig:
    """Knobs shared by all training loops.

    unroll_t only matters for dynamics; batch_size is windows per
    gradient step (scenes per step for the detector and renderer).
    """

    unroll_t: int = 5
    batch_size: int = 8
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    mode: str = "push"

    def __post_init__(self):
        if int(self.unroll_t) < 1:
            raise ConfigError("unroll length must be at least 1")
        if int(self.batch_size) < 1:
            raise ConfigError("batch size must be at least 1")
        if int(self.steps) < 0:
            raise ConfigError("step count cannot be negative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.mode not in ("push", "fall"):
            raise ConfigError(f"unknown mode: {self.mode!r}")
        self.unroll_t = int(self.unroll_t)
        self.batch_size = int(self.batch_size)
        self.steps = int(self.steps)
        self.lr = float(self.lr)


# ---------------------------------------------------------------------------
# episode unpacking

def episode_bodies(ep, t):
    """Rebuild simulator bodies at one frame from episode metadata."""
    out = []
    for i in range(ep.n_bodies):
        pose = ep.poses[t, i]
        out.append(Body(ep.kinds[i], ep.sizes[i], ep.colors[i],
                        pose[:3], geo.yaw_of_quat(pose[3:])))
    return out


def episode_views(ep, t, views=None):
    """(depth, rgb in [0,1], camera pose) triples for one frame."""
    if views is None:
        views = range(ep.n_views)
    out = []
    for v in views:
        pose = geo.CameraPose(ep.cam_origin[t, v], ep.cam_rot[t, v])
        out.append((ep.depth[t, v], ep.rgb[t, v].astype(np.float64) / 255.0,
                    pose))
    return out


def fused_grid(ep, t, intr, spec, views=None, dtype=np.float32):
    """Lift and fuse one frame's camera views into a [4,W,H,D] grid."""
    raws = [lift_view(d, c, intr, p, spec, dtype=dtype)
            for d, c, p in episode_views(ep, t, views)]
    return fuse_views(raws)


def pose_deltas(poses):
    """Per-step ground truth deltas from stored poses [T+1, N, 7].

    delta_p[t] = p[t+1] - p[t]; delta_r[t] composes r[t] into r[t+1],
    canonicalized to w >= 0 to match the predictor's output form.
    """
    p = poses[:, :, 0:3]
    q = geo.quat_normalize(poses[:, :, 3:7])
    dp = p[1:] - p[:-1]
    dr = geo.quat_canonical_np(geo.quat_mul_np(q[1:], geo.quat_conj(q[:-1])))
    return dp, dr


# ---------------------------------------------------------------------------
# dynamics dataset

@dataclass
class MotionSample:
    """One training window: initial scene, actions, ground truth deltas."""

    p0: np.ndarray            # [N, 3]
    r0: np.ndarray            # [N, 4] unit, w >= 0
    agent_p0: np.ndarray      # [3]
    actions: np.ndarray       # [T, 3]
    gt_dp: np.ndarray         # [T, N, 3]
    gt_dr: np.ndarray         # [T, N, 4] unit, w >= 0
    crops: np.ndarray | None  # [N, C, 16, 16, 16]

    @property
    def n_objects(self):
        return self.p0.shape[0]

    @property
    def n_steps(self):
        return self.actions.shape[0]


def build_motion_dataset(episodes, spec, lift_params=None, intr=None,
                         dtype=np.float32):
    """Assemble dynamics windows from episodes.

    With lift encoder parameters each window carries per-object crops
    of the encoded first-frame scene grid; without them crops are None
    and only the geometry-only variant can train on the result.
    """
    if intr is None:
        intr = geo.CameraIntrinsics.centered()
    encoder = LiftEncoder(lift_params) if lift_params is not None else None
    samples = []
    for ep in episodes:
        dp, dr = pose_deltas(ep.poses)
        p0 = ep.poses[0, :, 0:3]
        r0 = geo.quat_canonical_np(ep.poses[0, :, 3:7])
        if np.all(np.isfinite(ep.pusher[0])):
            agent_p0 = ep.pusher[0]
        else:
            agent_p0 = np.zeros(3)
        crops = None
        if encoder is not None:
            grid = encoder(fused_grid(ep, 0, intr, spec)).data
            crops = np.stack([crop_object(grid, p0[i], spec).data
                              for i in range(p0.shape[0])])
        samples.append(MotionSample(
            p0=p0.astype(dtype),
            r0=r0.astype(dtype),
            agent_p0=np.asarray(agent_p0, dtype=dtype),
            actions=ep.actions.astype(dtype),
            gt_dp=dp.astype(dtype),
            gt_dr=dr.astype(dtype),
            crops=None if crops is None else crops.astype(dtype)))
    return samples


def batch_windows(samples, t_steps):
    """Stack motion samples into (WindowBatch, actions, gt_dp, gt_dr).

    actions is [T, B, 3]; targets are [T, total_objects, ...] in the
    same object order forward_graph emits.
    """
    if len(samples) == 0:
        raise DataError("cannot batch zero windows")
    for s in samples:
        if s.n_steps < t_steps:
            raise DataError(f"window has {s.n_steps} steps, need {t_steps}")
    n_objects = [s.n_objects for s in samples]
    crops = None
    if all(s.crops is not None for s in samples):
        crops = np.concatenate([s.crops for s in samples])
    window = dyn.WindowBatch(
        n_objects,
        np.concatenate([s.p0 for s in samples]),
        np.concatenate([s.r0 for s in samples]),
        np.stack([s.agent_p0 for s in samples]),
        crops=crops)
    actions = np.stack([s.actions[:t_steps] for s in samples], axis=1)
    gt_dp = np.concatenate([s.gt_dp[:t_steps] for s in samples], axis=1)
    gt_dr = np.concatenate([s.gt_dr[:t_steps] for s in samples], axis=1)
    return window, actions, gt_dp, gt_dr


# ---------------------------------------------------------------------------
# losses

def motion_loss(preds, targets):
    """Sum over steps and objects of L2 pose-delta errors.

    preds and targets are equal-length sequences of (delta_p [N,3],
    delta_r [N,4]) pairs; target quaternions must be canonical (w >= 0)
    to match the predictor's output convention.  Quaternions are
    penalized as plain 4-vectors.
    """
    if len(preds) != len(targets):
        raise ShapeError(f"trajectory lengths differ: "
                         f"{len(preds)} predicted vs {len(targets)} target")
    total = T.Tensor(np.zeros(()))
    for (dp, dr), (tp, tr) in zip(preds, targets):
        step = T.add(T.sum_(T.vecnorm(T.sub(dp, tp))),
                     T.sum_(T.vecnorm(T.sub(dr, tr))))
        total = T.add(total, step)
    return total


# ---------------------------------------------------------------------------
# training loops

def _check_finite(value, what, step, curve):
    if not np.isfinite(value):
        tail = ", ".join(f"{v:.6g}" for v in curve[-5:]) or "none"
        raise NumericError(f"{what} loss became non-finite at step {step} "
                           f"(recent losses: {tail})")


def train_dynamics(config, dataset, variant="ours", rounds=1,
                   grid_channels=GRID_CHANNELS):
    """BPTT training of the motion model; returns (params, metrics).

    Each step samples config.batch_size windows with replacement,
    unrolls config.unroll_t steps, and applies one Adam update to the
    summed per-step pose-delta loss.  metrics carries the full loss
    curve.  A non-finite loss aborts with recent-history diagnostics.
    """
    if len(dataset) == 0:
        raise DataError("dynamics training needs a nonempty dataset")
    horizon = min(s.n_steps for s in dataset)
    if horizon < config.unroll_t:
        raise DataError(f"dataset windows support only {horizon} steps, "
                        f"config wants {config.unroll_t}")
    if variant == "ours" and any(s.crops is None for s in dataset):
        raise ConfigError("the ours variant needs crops in every sample")
    rng = np.random.default_rng(config.seed)
    params = T.ParamStore()
    model = dyn.MotionModel(params, variant=variant,
                            grid_channels=grid_channels, rounds=rounds,
                            rng=rng)
    curve = []
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        window, actions, gt_dp, gt_dr = batch_windows(
            [dataset[i] for i in idx], config.unroll_t)
        params.zero_grad()
        with T.Tape() as tape:
            _, preds = dyn.unroll(model, window, actions)
            loss = motion_loss(preds, list(zip(gt_dp, gt_dr)))
            value = float(loss.data)
            _check_finite(value, "dynamics", step, curve)
            tape.backward(loss)
        params.adam_step(config.lr)
        curve.append(value)
    metrics = {"target": "dynamics", "variant": variant,
               "steps": config.steps, "loss_curve": curve,
               "final_loss": curve[-1] if curve else None}
    return params, metrics


def motion_model_from(params, rounds=None):
    """Reconstruct a MotionModel around existing trained parameters."""
    names = set(params.names() if isinstance(params, T.ParamStore)
                else params.keys())
    variant = "ours" if "dyn.enc.conv0.k" in names else "xyz"
    if rounds is None:
        rounds = 2 if "dyn.update0.w" in names else 1
    grid_channels = GRID_CHANNELS
    store = params
    if not isinstance(params, T.ParamStore):
        store = T.ParamStore()
        for name, arr in params.items():
            store.add(name, arr)
    if variant == "ours":
        grid_channels = store["dyn.enc.conv0.k"].data.shape[1]
    return dyn.MotionModel(store, variant=variant,
                           grid_channels=grid_channels, rounds=rounds)


def train_renderer(config, dataset):
    """Joint lift-encoder + render-head training on held-out views.

    dataset entries are (fused_grid [4,W,H,D], camera rot [3,3],
    target rgb [3,size,size]) triples from build_render_dataset.
    """
    if len(dataset) == 0:
        raise DataError("renderer training needs a nonempty dataset")
    rng = np.random.default_rng(config.seed)
    params = T.ParamStore()
    encoder = LiftEncoder(params, rng=rng)
    head = RenderHead(params, rng=rng)
    curve = []
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        params.zero_grad()
        with T.Tape() as tape:
            total = T.Tensor(np.zeros(()))
            for i in idx:
                fused, rot, target = dataset[i]
                grid = encoder(fused)
                total = T.add(total, view_loss(grid, rot, target,
                                               config.grid, head,
                                               size=target.shape[-1]))
            loss = T.mul(total, 1.0 / len(idx))
            value = float(loss.data)
            _check_finite(value, "renderer", step, curve)
            tape.backward(loss)
        params.adam_step(config.lr)
        curve.append(value)
    metrics = {"target": "renderer", "steps": config.steps,
               "loss_curve": curve,
               "final_loss": curve[-1] if curve else None}
    return params, metrics


def build_render_dataset(episodes, spec, intr=None, frames=None,
                         target_view=0, size=RENDER_SIZE, dtype=np.float32):
    """View-regression pairs: fuse all other views, regress one.

    Returns (fused, target_rot, target_rgb) triples; the target view's
    pixels never enter the input grid.
    """
    if intr is None:
        intr = geo.CameraIntrinsics.centered()
    if intr.width % size or intr.height % size:
        raise ConfigError("image size must be a multiple of the render size")
    factor = intr.width // size
    samples = []
    for ep in episodes:
        if ep.n_views < 2:
            raise DataError("view regression needs at least two views")
        frame_ids = range(ep.poses.shape[0]) if frames is None else frames
        inputs = [v for v in range(ep.n_views) if v != target_view]
        for t in frame_ids:
            fused = fused_grid(ep, t, intr, spec, views=inputs, dtype=dtype)
            target = downsample_rgb(ep.rgb[t, target_view], factor)
            samples.append((fused, ep.cam_rot[t, target_view],
                            target.astype(dtype)))
    return samples


def eval_renderer(params, dataset, spec):
    """Held-out view MSE against the constant-mean-image baseline.

    The baseline predicts each target's own per-channel mean color, the
    best constant image for that target.
    """
    if len(dataset) == 0:
        raise DataError("renderer evaluation needs a nonempty dataset")
    encoder = LiftEncoder(params)
    head = RenderHead(params)
    mses = []
    base = []
    for fused, rot, target in dataset:
        pred = render_view(encoder(fused), rot, spec, head,
                           size=target.shape[-1]).data
        mses.append(float(np.mean((pred - target) ** 2)))
        flat = target.reshape(3, -1)
        base.append(float(np.mean((flat - flat.mean(axis=1, keepdims=True)) ** 2)))
    return {"mse": float(np.mean(mses)),
            "baseline_mse": float(np.mean(base)),
            "n": len(dataset)}


def rasterize_scene(bodies, spec, dtype=np.float32):
    """Analytic fused-style grid [4, W, H, D] from body geometry.

    Color channels carry each body's color inside its volume, the
    fourth channel is hard occupancy.  Later bodies overwrite earlier
    ones where they overlap.
    """
    centers = spec.cell_centers()
    color = np.zeros(spec.dims + (3,), dtype=np.float64)
    occ = np.zeros(spec.dims, dtype=np.float64)
    for body in bodies:
        inside = contains_points(body, centers)
        color[inside] = body.color
        occ[inside] = 1.0
    grid = np.concatenate([color.transpose(3, 0, 1, 2), occ[None]], axis=0)
    return grid.astype(dtype)


def scene_window(ep, t, lift_params, spec, intr=None, dtype=np.float32):
    """One episode frame -> (window, background, grid) for synthesis.

    The window carries ground-truth poses, encoded-grid crops, and
    per-object occupancy masks; background is the encoded grid outside
    every object, so splatting the masked crops back over it
    approximates the original grid at zero motion.
    """
    if intr is None:
        intr = geo.CameraIntrinsics.centered()
    bodies = episode_bodies(ep, t)
    if not bodies:
        raise DataError("scene synthesis needs at least one object")
    encoder = LiftEncoder(lift_params)
    grid = encoder(fused_grid(ep, t, intr, spec, dtype=dtype)).data
    p0 = np.stack([b.pos for b in bodies])
    r0 = geo.quat_canonical_np(np.stack([b.quat for b in bodies]))
    crops = np.stack([crop_object(grid, p, spec).data for p in p0])
    masks = np.stack([
        (crop_object(rasterize_scene([b], spec, dtype=dtype)[3:4], b.pos,
                     spec).data[0] >= 0.5).astype(dtype)
        for b in bodies])
    occ = rasterize_scene(bodies, spec, dtype=dtype)[3]
    background = grid * (1.0 - occ)[None]
    if ep.has_pusher and np.isfinite(ep.pusher[t]).all():
        agent_p0 = np.asarray(ep.pusher[t], dtype=np.float64)
    else:
        agent_p0 = np.zeros(3)
    window = dyn.WindowBatch([len(bodies)], p0, r0, agent_p0[None],
                             crops=crops, masks=masks)
    return window, background, grid


def build_detector_dataset(episodes, spec, lift_params, intr=None,
                           frames=(0,), source="lift", dtype=np.float32):
    """(encoded grid, bodies) pairs for detector training.

    source "lift" encodes fused camera views; "raster" encodes analytic
    occupancy grids built from ground truth geometry, isolating the
    detector from lifting noise.
    """
    if source not in ("lift", "raster"):
        raise ConfigError(f"unknown detector data source: {source!r}")
    if intr is None:
        intr = geo.CameraIntrinsics.centered()
    encoder = LiftEncoder(lift_params)
    samples = []
    for ep in episodes:
        for t in frames:
            bodies = episode_bodies(ep, t)
            if source == "lift":
                fused = fused_grid(ep, t, intr, spec, dtype=dtype)
            else:
                fused = rasterize_scene(bodies, spec, dtype=dtype)
            grid = encoder(fused).data.astype(dtype)
            samples.append((grid, bodies))
    return samples


def train_detector(config, dataset):
    """Supervised detection training on encoded scene grids.

    dataset entries are (grid, bodies) pairs.  Scenes without bodies
    leave the mask heads untouched that step, so their gradients are
    zero-filled before the update.
    """
    if len(dataset) == 0:
        raise DataError("detector training needs a nonempty dataset")
    rng = np.random.default_rng(config.seed)
    params = T.ParamStore()
    det = Detector(params, rng=rng)
    curve = []
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        params.zero_grad()
        with T.Tape() as tape:
            total = T.Tensor(np.zeros(()))
            for i in idx:
                grid, bodies = dataset[i]
                total = T.add(total, detection_loss(det, grid, bodies,
                                                    config.grid))
            loss = T.mul(total, 1.0 / len(idx))
            value = float(loss.data)
            _check_finite(value, "detector", step, curve)
            tape.backward(loss)
        for p in (params[n] for n in params.names()):
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        params.adam_step(config.lr)
        curve.append(value)
    metrics = {"target": "detector", "steps": config.steps,
               "loss_curve": curve,
               "final_loss": curve[-1] if curve else None}
    return params, metrics


def eval_detector(params, dataset, spec, tol=0.03):
    """Recall, precision, and centroid error over (grid, bodies) pairs."""
    det = Detector(params)
    n_gt = 0
    n_pred = 0
    n_matched = 0
    errs = []
    for grid, bodies in dataset:
        found = det.detect(grid, spec)
        gt = np.stack([b.pos for b in bodies]) if bodies else np.zeros((0, 3))
        pairs, _, _ = match_detections(found["centroids"], gt, tol=tol)
        n_gt += len(bodies)
        n_pred += found["centroids"].shape[0]
        n_matched += len(pairs)
        errs.extend(d for _, _, d in pairs)
    return {"recall": n_matched / n_gt if n_gt else 1.0,
            "precision": n_matched / n_pred if n_pred else 1.0,
            "centroid_err_voxels": float(np.mean(errs) / spec.voxel) if errs
            else 0.0,
            "n_scenes": len(dataset)}


# ---------------------------------------------------------------------------
# forecasting evaluation

def oracle_predictor(sample):
    """Prediction hook that feeds a sample's ground truth deltas back."""
    def predict(window, state, actions_t):
        t = state.step
        return (T.Tensor(np.asarray(sample.gt_dp[t], dtype=np.float64)),
                T.Tensor(np.asarray(sample.gt_dr[t], dtype=np.float64)))
    return predict


def eval_forecast(model, dataset, horizons=(1, 3, 5), predict_factory=None):
    """Mean forecast errors per horizon over a dataset.

    Returns {horizon: {"translation_mm": .., "rotation_deg": ..}}.
    Translation compares cumulative predicted displacement against
    ground truth; rotation is the geodesic angle between cumulative
    quaternions.  predict_factory(sample) may replace the model, e.g.
    with the ground-truth oracle.
    """
    horizons = sorted(set(int(h) for h in horizons))
    if not horizons or horizons[0] < 1:
        raise ConfigError("horizons must be positive integers")
    if len(dataset) == 0:
        raise DataError("forecast evaluation needs a nonempty dataset")
    steps = horizons[-1]
    trans = {h: [] for h in horizons}
    rot = {h: [] for h in horizons}
    for sample in dataset:
        if sample.n_steps < steps:
            raise DataError(f"window has {sample.n_steps} steps, "
                            f"evaluation needs {steps}")
        window, actions, gt_dp, gt_dr = batch_windows([sample], steps)
        predict = predict_factory(sample) if predict_factory else None
        states, _ = dyn.unroll(model, window, actions, predict=predict)
        pcum = np.cumsum(np.asarray(gt_dp, dtype=np.float64), axis=0)
        rcum = np.tile(geo.quat_identity(), (sample.n_objects, 1))
        rcums = []
        for t in range(steps):
            rcum = geo.quat_mul_np(gt_dr[t], rcum)
            rcums.append(rcum)
        for h in horizons:
            st = states[h]
            err = np.linalg.norm(np.asarray(st.p_hat.data, dtype=np.float64)
                                 - pcum[h - 1], axis=1)
            trans[h].extend(1000.0 * err)
            ang = geo.quat_angle_between(
                geo.quat_normalize(np.asarray(st.r_hat.data)),
                geo.quat_normalize(rcums[h - 1]))
            rot[h].extend(np.degrees(ang))
    return {h: {"translation_mm": float(np.mean(trans[h])),
                "rotation_deg": float(np.mean(rot[h]))}
            for h in horizons}


def mean_step_displacement(dataset):
    """Mean per-step ground truth displacement in mm over all objects."""
    norms = [np.linalg.norm(s.gt_dp.astype(np.float64), axis=2).ravel()
             for s in dataset]
    return 1000.0 * float(np.mean(np.concatenate(norms)))


def forecast_report(results, horizons=(1, 3, 5)):
    """Render forecast metrics for people and for machines.

    results maps variant name -> eval_forecast output.  Returns
    (table_text, cell_lines): a fixed-width table with one row per
    variant, and one "variant horizon metric value" line per cell.
    """
    horizons = sorted(set(int(h) for h in horizons))
    header = (["model"]
              + [f"T={h} trans(mm)" for h in horizons]
              + [f"T={h} rot(deg)" for h in horizons])
    rows = [header]
    lines = []
    for variant, res in results.items():
        row = [variant]
        row += [f"{res[h]['translation_mm']:.3f}" for h in horizons]
        row += [f"{res[h]['rotation_deg']:.3f}" for h in horizons]
        rows.append(row)
        for h in horizons:
            lines.append(f"{variant} {h} translation_mm "
                         f"{res[h]['translation_mm']:.9g}")
            lines.append(f"{variant} {h} rotation_deg "
                         f"{res[h]['rotation_deg']:.9g}")
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    table = "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in rows)
    return table + "\n", "\n".join(lines) + "\n"


def dump_trajectory(states, path=None):
    """Text dump of an unroll: one line per step per object."""
    lines = ["step object px py pz qw qx qy qz"]
    for s, state in enumerate(states):
        p = np.asarray(state.p_hat.data, dtype=np.float64)
        q = np.asarray(state.r_hat.data, dtype=np.float64)
        for o in range(p.shape[0]):
            vals = " ".join(f"{v:.17g}" for v in (*p[o], *q[o]))
            lines.append(f"{s} {o} {vals}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def write_loss_curve(path, curve):
    """CSV loss curve: step index and loss value per line."""
    lines = ["step,loss"] + [f"{i},{v:.9g}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")
