"""Lifting and neural rendering tests.

The fusion algebra (idempotence, empty-view neutrality) and the exact
lattice behavior of the camera-aligned projection are pinned down at
float64; the learned pieces are only checked for shape, range, gradient
flow, and trainability on toy targets.
"""

import numpy as np
import pytest

from voxsim import geometry as geo
from voxsim import lift as L
from voxsim import renderer as R
from voxsim import sim
from voxsim import tensor as T
from voxsim.errors import ConfigError, ShapeError


def _spec():
    return L.GridSpec()


# ---------------------------------------------------------------------------
# grid spec

def test_gridspec_conversions():
    spec = _spec()
    # cell i center sits at origin + (i + 0.5) voxel
    world = spec.origin + (np.array([3, 5, 7]) + 0.5) * spec.voxel
    coords = spec.world_to_voxel(world)
    assert np.abs(coords - [3.0, 5.0, 7.0]).max() < 1e-12
    back = spec.voxel_to_world(coords)
    assert np.abs(back - world).max() < 1e-12


def test_gridspec_center_is_half_lattice():
    spec = _spec()
    c = spec.world_to_voxel(spec.center())
    assert np.abs(c - 15.5).max() < 1e-12


def test_gridspec_default_covers_table():
    spec = _spec()
    hi = spec.origin + np.asarray(spec.dims) * spec.voxel
    assert np.abs(spec.origin[:2] + 0.3).max() < 1e-12
    assert np.abs(hi[:2] - 0.3).max() < 1e-12
    assert spec.origin[2] < 0 < hi[2]


def test_gridspec_validation():
    with pytest.raises(ConfigError):
        L.GridSpec(dims=(0, 32, 32))
    with pytest.raises(ConfigError):
        L.GridSpec(voxel=-1.0)


# ---------------------------------------------------------------------------
# lifting and fusion

def _simple_scene(n_views=3, size=0.09):
    body = sim.Body(sim.BOX, size, (0.85, 0.2, 0.15), (0.0, 0.0, size / 2.0))
    intr = geo.CameraIntrinsics.centered()
    views = []
    for az in (90.0, 210.0, 330.0)[:n_views]:
        pose = geo.ring_camera(np.deg2rad(az), np.deg2rad(40.0), 1.0)
        depth, rgb = sim.render_scene([body], intr, pose)
        views.append((depth, rgb, pose))
    return body, intr, views


def test_lift_view_weight_accounting():
    body, intr, views = _simple_scene(1)
    depth, rgb, pose = views[0]
    spec = _spec()
    raw = L.lift_view(depth, rgb, intr, pose, spec, dtype=np.float64)
    assert raw.shape == (4, 32, 32, 32)
    # a pixel whose point lands fully inside the grid deposits exactly
    # unit weight; boundary and outside points deposit less (the table
    # plane extends past the grid)
    pts = geo.unproject(depth, intr, pose)[depth > 0]
    coords = spec.world_to_voxel(pts)
    full = np.all((coords >= 0.0) & (coords <= 31.0), axis=1)
    total = raw[3].sum()
    assert total >= full.sum() - 1e-6
    assert total <= (depth > 0).sum() + 1e-6
    assert full.sum() > 500  # the scene is actually in view


def test_fuse_is_sum_then_normalize():
    body, intr, views = _simple_scene(3)
    spec = _spec()
    raws = [L.lift_view(d, c, intr, p, spec, dtype=np.float64) for d, c, p in views]
    a = L.fuse_views(raws)
    b = L.fuse_views([raws[0] + raws[1] + raws[2]])
    assert np.array_equal(a, b)


def test_fuse_empty_view_is_neutral():
    body, intr, views = _simple_scene(2)
    spec = _spec()
    raws = [L.lift_view(d, c, intr, p, spec, dtype=np.float64) for d, c, p in views]
    fused = L.fuse_views(raws)
    with_empty = L.fuse_views(raws + [np.zeros_like(raws[0])])
    assert np.array_equal(fused, with_empty)


def test_fused_occupancy_range_and_sparsity():
    body, intr, views = _simple_scene(3)
    spec = _spec()
    raws = [L.lift_view(d, c, intr, p, spec, dtype=np.float64) for d, c, p in views]
    fused = L.fuse_views(raws)
    occ = fused[3]
    assert occ.min() >= 0.0
    assert occ.max() < 1.0
    # cells far from any surface stay exactly empty
    centers = spec.cell_centers()
    far = (centers[..., 2] > 0.15) & (np.linalg.norm(centers[..., :2], axis=-1) > 0.2)
    assert np.all(occ[far] == 0.0)


def test_fused_grid_localizes_the_body():
    body, intr, views = _simple_scene(3)
    spec = _spec()
    raws = [L.lift_view(d, c, intr, p, spec, dtype=np.float64) for d, c, p in views]
    fused = L.fuse_views(raws)
    occ = fused[3]
    centers = spec.cell_centers()
    h = body.size / 2.0
    rel = np.abs(centers - body.pos)
    sdf_box = np.maximum.reduce([rel[..., 0] - h, rel[..., 1] - h, rel[..., 2] - h])
    shell = np.abs(sdf_box) <= spec.voxel
    away = (sdf_box > 0.05) & (centers[..., 2] > 0.05)
    assert occ[shell].mean() > 0.2
    assert occ[away].mean() < 0.01
    # the body is red: fused color above the top face leans red
    top = shell & (centers[..., 2] > body.size - spec.voxel)
    assert fused[0][top].mean() > fused[1][top].mean()
    assert fused[0][top].mean() > fused[2][top].mean()


def test_lift_view_input_validation():
    spec = _spec()
    intr = geo.CameraIntrinsics.centered(width=8, height=8)
    pose = geo.ring_camera(0.5, 0.7, 1.0)
    with pytest.raises(ShapeError):
        L.lift_view(np.zeros((8, 8)), np.zeros((4, 4, 3)), intr, pose, spec)
    with pytest.raises(ShapeError):
        L.lift_view(np.zeros((8, 8)), np.full((8, 8, 3), 200.0), intr, pose, spec)
    with pytest.raises(ShapeError):
        L.fuse_views([])


def test_lift_encoder_shapes_and_grads():
    rng = np.random.default_rng(0)
    ps = T.ParamStore(dtype=np.float64)
    enc = L.LiftEncoder(ps, rng=rng)
    fused = rng.standard_normal((4, 8, 8, 8))  # small grid for speed
    with T.Tape() as tape:
        out = enc(T.Tensor(fused))
        assert out.shape == (8, 8, 8, 8)
        tape.backward(T.mean(T.mul(out, out)))
    for name in enc.param_names():
        assert ps[name].grad is not None
        assert np.any(ps[name].grad != 0.0)


def test_lift_encoder_reuses_existing_params():
    rng = np.random.default_rng(0)
    ps = T.ParamStore()
    enc1 = L.LiftEncoder(ps, rng=rng)
    enc2 = L.LiftEncoder(ps)  # no rng needed, params exist
    assert enc1.param_names() == enc2.param_names()
    with pytest.raises(ConfigError):
        L.LiftEncoder(T.ParamStore())  # fresh store without rng


# ---------------------------------------------------------------------------
# projection exactness

def _small_spec():
    return L.GridSpec(dims=(8, 8, 8), voxel=0.05, origin=(-0.2, -0.2, -0.2))


def test_identity_projection_is_depth_mean():
    rng = np.random.default_rng(5)
    spec = _small_spec()
    grid = rng.standard_normal((3, 8, 8, 8))
    out = R.orient_and_project(T.Tensor(grid, dtype=np.float64), np.eye(3), spec, size=8)
    # right=+x, down=+y, forward=+z: out[c, v, u] = mean_d grid[c, u, v, d]
    want = grid.mean(axis=3).transpose(0, 2, 1)
    assert np.array_equal(out.data, want)


def test_rolled_projection_permutes_exactly():
    rng = np.random.default_rng(6)
    spec = _small_spec()
    grid = rng.standard_normal((2, 8, 8, 8))
    # camera rolled 90 degrees: right=+y, down=-x, forward=+z
    rot = np.array([[0.0, -1.0, 0.0],
                    [1.0, 0.0, 0.0],
                    [0.0, 0.0, 1.0]])
    out = R.orient_and_project(T.Tensor(grid, dtype=np.float64), rot, spec, size=8)
    mean_d = grid.mean(axis=3)  # [C, x, y]
    want = np.zeros((2, 8, 8))
    for i in range(8):  # v index
        for j in range(8):  # u index
            want[:, i, j] = mean_d[:, 7 - i, j]
    assert np.array_equal(out.data, want)


def test_projection_grad_flows_to_grid_only():
    rng = np.random.default_rng(7)
    spec = _small_spec()
    grid = T.Tensor(rng.standard_normal((2, 8, 8, 8)), requires_grad=True,
                    dtype=np.float64)
    pose = geo.ring_camera(0.3, 0.6, 1.0)
    with T.Tape() as tape:
        out = R.orient_and_project(grid, pose.rot, spec, size=8)
        tape.backward(T.mean(T.mul(out, out)))
    assert grid.grad is not None
    assert np.isfinite(grid.grad).all()


# ---------------------------------------------------------------------------
# render head

def test_render_head_range_and_shape():
    rng = np.random.default_rng(8)
    ps = T.ParamStore()
    head = R.RenderHead(ps, rng=rng)
    feats = rng.standard_normal((8, 16, 16)).astype(np.float32)
    out = head(feats)
    assert out.shape == (3, 16, 16)
    assert out.data.min() > 0.0 and out.data.max() < 1.0
    batch = rng.standard_normal((4, 8, 16, 16)).astype(np.float32)
    assert head(batch).shape == (4, 3, 16, 16)


def test_render_pipeline_fits_toy_target():
    rng = np.random.default_rng(9)
    spec = _small_spec()
    ps = T.ParamStore(dtype=np.float64)
    head = R.RenderHead(ps, rng=rng)
    grid_param = ps.add("scene", rng.standard_normal((8, 8, 8, 8)) * 0.1)
    target = rng.uniform(0.2, 0.8, size=(3, 8, 8))
    pose = geo.ring_camera(0.8, 0.5, 1.0)
    losses = []
    for _ in range(60):
        ps.zero_grad()
        with T.Tape() as tape:
            loss = R.view_loss(grid_param, pose.rot, target, spec, head, size=8)
            tape.backward(loss)
        ps.adam_step(lr=3e-2)
        losses.append(float(loss.data))
    assert losses[-1] < 0.25 * losses[0]


def test_downsample_rgb_box_average():
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    img[0::2, 0::2] = 255  # checkerboard in 2x2 blocks
    small = R.downsample_rgb(img, 2)
    assert small.shape == (3, 2, 2)
    assert np.abs(small - 0.25).max() < 1e-12
    with pytest.raises(ShapeError):
        R.downsample_rgb(np.zeros((5, 4, 3), dtype=np.uint8), 2)
