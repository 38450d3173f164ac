"""Training loop and evaluation tests.

Overfit oracles: each learned component must crush its loss on one
memorized batch.  Evaluation metrics are checked against analytic
anchors: feeding ground truth deltas back must score zero, and the
geodesic error between identity and a quarter turn must be 90 degrees.
"""

import numpy as np
import pytest

from voxsim import dynamics as dyn
from voxsim import geometry as geo
from voxsim import tensor as T
from voxsim import training as tr
from voxsim.detector import Detector, detection_targets
from voxsim.errors import ConfigError, DataError, NumericError, ShapeError
from voxsim.lift import GridSpec, LiftEncoder
from voxsim.sim.bodies import BOX, CYLINDER, Body
from voxsim.sim.generate import generate_episode

from gradcheck import fd_directional

SPEC = GridSpec((16, 16, 16), voxel=0.0375, origin=(-0.3, -0.3, -0.075))


def toy_sample(seed, n_objects=2, t=5, channels=4, motion=0.02):
    """Synthetic but well-formed training window."""
    rng = np.random.default_rng(seed)
    return tr.MotionSample(
        p0=rng.uniform(-0.1, 0.1, (n_objects, 3)),
        r0=geo.quat_canonical_np(geo.quat_yaw(rng.uniform(-1, 1, n_objects))),
        agent_p0=rng.uniform(-0.1, 0.1, 3),
        actions=rng.uniform(-0.05, 0.05, (t, 3)),
        gt_dp=rng.uniform(-motion, motion, (t, n_objects, 3)),
        gt_dr=geo.quat_canonical_np(
            geo.quat_yaw(rng.uniform(-0.3, 0.3, (t, n_objects)))),
        crops=(0.1 * rng.standard_normal((n_objects, channels, 16, 16, 16))
               .astype(np.float32)))


# ---------------------------------------------------------------------------
# config and data plumbing

def test_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(unroll_t=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(mode="swim")
    cfg = tr.TrainConfig()
    assert cfg.unroll_t == 5 and cfg.batch_size == 8


def test_pose_deltas_roundtrip():
    rng = np.random.default_rng(5)
    t, n = 4, 3
    poses = np.zeros((t + 1, n, 7))
    poses[0, :, 0:3] = rng.uniform(-0.1, 0.1, (n, 3))
    poses[0, :, 3:7] = geo.quat_yaw(rng.uniform(-1, 1, n))
    steps_p = rng.uniform(-0.02, 0.02, (t, n, 3))
    steps_q = geo.quat_yaw(rng.uniform(-0.4, 0.4, (t, n)))
    for k in range(t):
        poses[k + 1, :, 0:3] = poses[k, :, 0:3] + steps_p[k]
        poses[k + 1, :, 3:7] = geo.quat_mul_np(steps_q[k], poses[k, :, 3:7])
    dp, dr = tr.pose_deltas(poses)
    assert np.allclose(dp, steps_p, atol=1e-12)
    assert np.all(dr[..., 0] >= 0)
    for k in range(t):
        recomposed = geo.quat_mul_np(dr[k], poses[k, :, 3:7])
        angle = geo.quat_angle_between(recomposed, poses[k + 1, :, 3:7])
        # arccos loses resolution near a dot of 1; 1e-6 rad is its floor
        assert np.max(angle) < 1e-6


def test_build_motion_dataset_from_episode():
    ep = generate_episode(77, split="train", protocol="push")
    lift_params = T.ParamStore()
    LiftEncoder(lift_params, rng=np.random.default_rng(0))
    ds = tr.build_motion_dataset([ep], SPEC, lift_params=lift_params)
    assert len(ds) == 1
    s = ds[0]
    n = ep.n_bodies
    assert s.p0.shape == (n, 3) and s.r0.shape == (n, 4)
    assert s.crops.shape == (n, 8, 16, 16, 16)
    assert s.crops.dtype == np.float32
    assert s.gt_dp.shape == (5, n, 3) and s.gt_dr.shape == (5, n, 4)
    assert np.all(s.gt_dr[..., 0] >= 0)
    assert np.allclose(s.agent_p0, ep.pusher[0], atol=1e-7)
    bare = tr.build_motion_dataset([ep], SPEC)
    assert bare[0].crops is None


def test_batch_windows_layout():
    a = toy_sample(1, n_objects=2)
    b = toy_sample(2, n_objects=1)
    window, actions, gt_dp, gt_dr = tr.batch_windows([a, b], 3)
    assert window.graph.n_windows == 2
    assert window.graph.total_objects == 3
    assert actions.shape == (3, 2, 3)
    assert np.array_equal(actions[:, 0], a.actions[:3])
    assert np.array_equal(actions[:, 1], b.actions[:3])
    assert gt_dp.shape == (3, 3, 3) and gt_dr.shape == (3, 3, 4)
    assert np.array_equal(gt_dp[:, :2], a.gt_dp[:3])
    assert np.array_equal(gt_dp[:, 2], b.gt_dp[:3, 0])
    assert window.crops.shape == (3, 4, 16, 16, 16)
    with pytest.raises(DataError):
        tr.batch_windows([], 3)
    with pytest.raises(DataError):
        tr.batch_windows([a], 9)


# ---------------------------------------------------------------------------
# motion loss

def test_motion_loss_perfect_is_zero():
    s = toy_sample(3)
    targets = list(zip(s.gt_dp, s.gt_dr))
    loss = tr.motion_loss(targets, targets)
    assert float(loss.data) == 0.0


def test_motion_loss_euclidean_example():
    pred = [(np.array([[0.003, 0.004, 0.0]]), np.array([[1.0, 0, 0, 0]]))]
    target = [(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]))]
    loss = tr.motion_loss(pred, target)
    assert abs(float(loss.data) - 0.005) < 1e-12


def test_motion_loss_nonnegative_and_mismatch():
    a = toy_sample(4)
    b = toy_sample(5)
    loss = tr.motion_loss(list(zip(a.gt_dp, a.gt_dr)),
                          list(zip(b.gt_dp, b.gt_dr)))
    assert float(loss.data) >= 0.0
    with pytest.raises(ShapeError):
        tr.motion_loss(list(zip(a.gt_dp, a.gt_dr)),
                       list(zip(b.gt_dp, b.gt_dr))[:3])


def test_motion_loss_grads():
    rng = np.random.default_rng(11)
    dp = rng.standard_normal((3, 3))
    dr = rng.standard_normal((3, 4))
    tp = rng.standard_normal((3, 3))
    tq = rng.standard_normal((3, 4))

    def run(x):
        t = T.Tensor(x, requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            loss = tr.motion_loss([(t, T.Tensor(dr))], [(tp, tq)])
            tape.backward(loss)
        return float(loss.data), t.grad

    _, grad = run(dp)
    direction = rng.standard_normal(dp.shape)
    fd = fd_directional(lambda x: run(x)[0], dp, direction, eps=1e-6)
    assert abs(np.sum(grad * direction) - fd) < 1e-7 * max(1.0, abs(fd))


# ---------------------------------------------------------------------------
# dynamics training

def test_train_dynamics_single_batch_overfit():
    ds = [toy_sample(21, n_objects=2, channels=4)]
    cfg = tr.TrainConfig(steps=500, batch_size=2, seed=9)
    params, metrics = tr.train_dynamics(cfg, ds, grid_channels=4)
    curve = metrics["loss_curve"]
    assert len(curve) == 500
    assert min(curve) <= curve[0] / 10.0


def test_train_dynamics_seeded_bitwise_checkpoint():
    ds = [toy_sample(22, n_objects=1, channels=4), toy_sample(23, channels=4)]
    cfg = tr.TrainConfig(steps=40, batch_size=2, seed=5)
    p1, m1 = tr.train_dynamics(cfg, ds, grid_channels=4)
    p2, m2 = tr.train_dynamics(cfg, ds, grid_channels=4)
    assert m1["loss_curve"] == m2["loss_curve"]
    s1, s2 = p1.state_dict(), p2.state_dict()
    assert sorted(s1) == sorted(s2)
    for name in s1:
        assert np.array_equal(s1[name], s2[name]), name


def test_train_dynamics_nan_aborts_with_diagnostics():
    s = toy_sample(24, channels=4)
    s.gt_dp[2, 0, 1] = np.nan
    cfg = tr.TrainConfig(steps=10, batch_size=1, seed=0)
    with pytest.raises(NumericError, match="non-finite"):
        tr.train_dynamics(cfg, [s], grid_channels=4)


def test_train_dynamics_validation():
    with pytest.raises(DataError):
        tr.train_dynamics(tr.TrainConfig(steps=1), [])
    short = toy_sample(25, t=3, channels=4)
    with pytest.raises(DataError):
        tr.train_dynamics(tr.TrainConfig(steps=1, unroll_t=5), [short])
    bare = toy_sample(26, channels=4)
    bare.crops = None
    with pytest.raises(ConfigError):
        tr.train_dynamics(tr.TrainConfig(steps=1), [bare])


def test_train_dynamics_xyz_needs_no_crops():
    s = toy_sample(27)
    s.crops = None
    cfg = tr.TrainConfig(steps=25, batch_size=2, seed=2)
    params, metrics = tr.train_dynamics(cfg, [s], variant="xyz")
    assert np.isfinite(metrics["loss_curve"]).all()
    assert not any(".enc." in n for n in params.names())


def test_motion_model_from_checkpoint_dict():
    s = toy_sample(28, channels=4)
    cfg = tr.TrainConfig(steps=5, batch_size=1, seed=3)
    params, _ = tr.train_dynamics(cfg, [s], grid_channels=4)
    model = tr.motion_model_from(params.state_dict())
    assert model.variant == "ours"
    window, actions, _, _ = tr.batch_windows([s], 5)
    ref = tr.motion_model_from(params)
    out_a = model.forward_graph(window, dyn.init_state(model, window),
                                actions[0])
    out_b = ref.forward_graph(window, dyn.init_state(ref, window), actions[0])
    assert np.array_equal(out_a[0].data, out_b[0].data)
    assert np.array_equal(out_a[1].data, out_b[1].data)
    xyz_params, _ = tr.train_dynamics(cfg, [s], variant="xyz")
    assert tr.motion_model_from(xyz_params).variant == "xyz"


# ---------------------------------------------------------------------------
# forecast evaluation

def test_eval_forecast_oracle_is_zero():
    ds = [toy_sample(31, n_objects=2), toy_sample(32, n_objects=1)]
    res = tr.eval_forecast(None, ds, predict_factory=tr.oracle_predictor)
    for h in (1, 3, 5):
        assert res[h]["translation_mm"] < 1e-9
        assert res[h]["rotation_deg"] < 1e-5


def test_eval_forecast_identity_vs_quarter_turn():
    quarter = geo.quat_yaw(np.pi / 2.0)
    s = tr.MotionSample(
        p0=np.zeros((1, 3)), r0=np.array([[1.0, 0, 0, 0]]),
        agent_p0=np.array([0.2, 0.0, 0.0]), actions=np.zeros((1, 3)),
        gt_dp=np.array([[[0.01, 0.0, 0.0]]]), gt_dr=quarter[None, None],
        crops=None)
    res = tr.eval_forecast(None, [s], horizons=(1,),
                           predict_factory=lambda _: dyn.zero_motion)
    assert abs(res[1]["rotation_deg"] - 90.0) < 1e-9
    assert abs(res[1]["translation_mm"] - 10.0) < 1e-9


def test_eval_forecast_geodesic_range_and_determinism():
    rng = np.random.default_rng(33)
    s = toy_sample(34, n_objects=3)
    s.gt_dr = geo.quat_normalize(rng.standard_normal((5, 3, 4)))
    res = tr.eval_forecast(None, [s], predict_factory=lambda _: dyn.zero_motion)
    for h in res:
        assert 0.0 <= res[h]["rotation_deg"] <= 180.0
    again = tr.eval_forecast(None, [s],
                             predict_factory=lambda _: dyn.zero_motion)
    assert res == again
    with pytest.raises(DataError):
        tr.eval_forecast(None, [], predict_factory=lambda _: dyn.zero_motion)
    with pytest.raises(ConfigError):
        tr.eval_forecast(None, [s], horizons=(0,),
                         predict_factory=lambda _: dyn.zero_motion)


def test_mean_step_displacement():
    s = toy_sample(35, n_objects=1, t=2)
    s.gt_dp = np.array([[[0.003, 0.004, 0.0]], [[0.0, 0.0, 0.01]]])
    assert abs(tr.mean_step_displacement([s]) - 7.5) < 1e-9


def test_forecast_report_layout():
    results = {
        "ours": {1: {"translation_mm": 3.6, "rotation_deg": 2.4},
                 5: {"translation_mm": 43.4, "rotation_deg": 9.9}},
        "graph-xyz": {1: {"translation_mm": 4.1, "rotation_deg": 2.5},
                      5: {"translation_mm": 66.3, "rotation_deg": 11.0}},
    }
    table, cells = tr.forecast_report(results, horizons=(1, 5))
    lines = table.strip().split("\n")
    assert len(lines) == 3
    assert lines[0].startswith("model")
    assert "T=1 trans(mm)" in lines[0] and "T=5 rot(deg)" in lines[0]
    assert lines[1].startswith("ours") and "43.400" in lines[1]
    cell_lines = cells.strip().split("\n")
    assert len(cell_lines) == 2 * 2 * 2
    assert "ours 5 translation_mm 43.4" in cell_lines
    assert "graph-xyz 1 rotation_deg 2.5" in cell_lines


def test_dump_trajectory(tmp_path):
    s = toy_sample(36, n_objects=2)
    window, actions, _, _ = tr.batch_windows([s], 3)
    states, _ = dyn.unroll(None, window, actions,
                           predict=dyn.zero_motion)
    path = tmp_path / "traj.txt"
    text = tr.dump_trajectory(states, path)
    assert path.read_text() == text
    lines = text.strip().split("\n")
    assert lines[0].split() == ["step", "object", "px", "py", "pz",
                                "qw", "qx", "qy", "qz"]
    assert len(lines) == 1 + 4 * 2
    first = lines[1].split()
    assert first[0] == "0" and first[1] == "0"
    assert [float(v) for v in first[2:]] == [0, 0, 0, 1, 0, 0, 0]


def test_write_loss_curve(tmp_path):
    path = tmp_path / "loss.csv"
    tr.write_loss_curve(path, [1.5, 0.25])
    assert path.read_text() == "step,loss\n0,1.5\n1,0.25\n"


# ---------------------------------------------------------------------------
# detector training

@pytest.fixture(scope="module")
def detector_setup():
    bodies = [Body(BOX, 0.07, (0.9, 0.2, 0.1), (0.05, -0.03, 0.035), yaw=0.4),
              Body(CYLINDER, 0.09, (0.1, 0.8, 0.3), (-0.08, 0.06, 0.045))]
    lift_params = T.ParamStore()
    LiftEncoder(lift_params, rng=np.random.default_rng(0))
    encoder = LiftEncoder(lift_params)
    grid = encoder(tr.rasterize_scene(bodies, SPEC)).data.astype(np.float32)
    empty = encoder(tr.rasterize_scene([], SPEC)).data.astype(np.float32)
    dataset = [(grid, bodies)]
    cfg = tr.TrainConfig(steps=300, batch_size=1, seed=3, grid=SPEC, lr=3e-3)
    params, metrics = tr.train_detector(cfg, dataset)
    return params, metrics, dataset, grid, empty, bodies


def test_rasterize_scene():
    body = Body(BOX, 0.08, (0.9, 0.1, 0.2), (0.0, 0.0, 0.04))
    grid = tr.rasterize_scene([body], SPEC)
    assert grid.shape == (4,) + SPEC.dims
    occupied = grid[3] > 0
    assert occupied.sum() > 0
    assert np.allclose(grid[0][occupied], 0.9, atol=1e-6)
    assert np.all(grid[3][~occupied] == 0.0)
    assert np.all(tr.rasterize_scene([], SPEC) == 0.0)


def test_train_detector_overfit_objectness(detector_setup):
    params, metrics, dataset, grid, _, bodies = detector_setup
    assert metrics["final_loss"] < metrics["loss_curve"][0]
    det = Detector(params)
    obj, _, _ = det.forward(grid)
    obj_t, w, *_ = detection_targets(bodies, SPEC)
    bce = float(T.bce_with_logits(T.reshape(obj, obj_t.shape), obj_t,
                                  weights=w).data)
    assert bce < 0.05


def test_eval_detector_after_overfit(detector_setup):
    params, _, dataset, _, empty, _ = detector_setup
    res = tr.eval_detector(params, dataset, SPEC)
    assert res["recall"] == 1.0
    assert res["precision"] == 1.0
    assert res["centroid_err_voxels"] < 1.0
    det = Detector(params)
    found = det.detect(empty, SPEC)
    assert found["centroids"].shape == (0, 3)
    clean = tr.eval_detector(params, [(empty, [])], SPEC)
    assert clean["recall"] == 1.0 and clean["precision"] == 1.0


def test_train_detector_determinism_and_validation(detector_setup):
    _, _, dataset, _, _, _ = detector_setup
    cfg = tr.TrainConfig(steps=6, batch_size=1, seed=8, grid=SPEC)
    p1, m1 = tr.train_detector(cfg, dataset)
    p2, m2 = tr.train_detector(cfg, dataset)
    assert m1["loss_curve"] == m2["loss_curve"]
    for name, arr in p1.state_dict().items():
        assert np.array_equal(arr, p2.state_dict()[name]), name
    with pytest.raises(DataError):
        tr.train_detector(cfg, [])


# ---------------------------------------------------------------------------
# renderer training

@pytest.fixture(scope="module")
def renderer_setup():
    ep = generate_episode(123, split="train", protocol="push")
    dataset = tr.build_render_dataset([ep], SPEC, frames=(0,), size=16)
    cfg = tr.TrainConfig(steps=300, batch_size=1, seed=4, grid=SPEC, lr=3e-3)
    params, metrics = tr.train_renderer(cfg, dataset)
    return params, metrics, dataset


def test_build_render_dataset_shapes():
    ep = generate_episode(124, split="train", protocol="push")
    ds = tr.build_render_dataset([ep], SPEC, frames=(0, 2), size=16)
    assert len(ds) == 2
    fused, rot, target = ds[0]
    assert fused.shape == (4,) + SPEC.dims
    assert rot.shape == (3, 3)
    assert target.shape == (3, 16, 16)
    assert target.dtype == np.float32
    with pytest.raises(ConfigError):
        tr.build_render_dataset([ep], SPEC, size=24)


def test_train_renderer_overfit_mse(renderer_setup):
    params, metrics, dataset = renderer_setup
    assert metrics["final_loss"] < 0.01
    res = tr.eval_renderer(params, dataset, SPEC)
    assert res["mse"] < 0.01
    assert res["baseline_mse"] > res["mse"]


def test_train_renderer_determinism(renderer_setup):
    _, _, dataset = renderer_setup
    cfg = tr.TrainConfig(steps=5, batch_size=1, seed=6, grid=SPEC)
    p1, m1 = tr.train_renderer(cfg, dataset)
    p2, m2 = tr.train_renderer(cfg, dataset)
    assert m1["loss_curve"] == m2["loss_curve"]
    for name, arr in p1.state_dict().items():
        assert np.array_equal(arr, p2.state_dict()[name]), name
    with pytest.raises(DataError):
        tr.train_renderer(cfg, [])
