"""Kernel layer tests.

The numpy reference kernels are checked against small pure-python
oracles and analytic values; the jit backend, when importable, must
agree with the reference to near machine precision.  The trilinear
sample and splat must be exact adjoint linear maps.
"""

import numpy as np
import pytest

from voxsim.kernels import cpu

try:
    from voxsim.kernels import jit
    HAVE_JIT = True
except ImportError:
    jit = None
    HAVE_JIT = False

BACKENDS = [pytest.param(cpu, id="numpy")]
if HAVE_JIT:
    BACKENDS.append(pytest.param(jit, id="numba"))


def _c(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# trilinear sample / splat

@pytest.mark.parametrize("K", BACKENDS)
def test_sample3d_hand_value(K):
    # single corner weight: fx (1-fy) (1-fz) = 0.25 * 0.5 * 0.25
    grid = np.zeros((1, 2, 2, 2))
    grid[0, 1, 0, 0] = 8.0
    coords = _c([[0.25, 0.5, 0.75]])
    out = K.sample3d(_c(grid), coords)
    assert abs(out[0, 0] - 0.25) < 1e-14


@pytest.mark.parametrize("K", BACKENDS)
def test_sample3d_on_lattice_is_lookup(K):
    rng = np.random.default_rng(11)
    grid = _c(rng.standard_normal((3, 4, 5, 6)))
    idx = np.stack(np.meshgrid(np.arange(4), np.arange(5), np.arange(6),
                               indexing="ij"), axis=-1).reshape(-1, 3)
    out = K.sample3d(grid, _c(idx))
    expect = grid[:, idx[:, 0], idx[:, 1], idx[:, 2]].T
    assert np.array_equal(out, expect)


@pytest.mark.parametrize("K", BACKENDS)
def test_sample3d_zero_outside(K):
    grid = _c(np.ones((2, 3, 3, 3)))
    coords = _c([[-1.5, 1.0, 1.0], [1.0, 7.0, 1.0], [1.0, 1.0, 3.0]])
    out = K.sample3d(grid, coords)
    assert np.array_equal(out, np.zeros((3, 2)))


@pytest.mark.parametrize("K", BACKENDS)
def test_sample3d_partial_boundary(K):
    # half a cell outside along x: only the inside corner pair contributes
    grid = _c(np.ones((1, 3, 3, 3)))
    out = K.sample3d(grid, _c([[-0.5, 1.0, 1.0]]))
    assert abs(out[0, 0] - 0.5) < 1e-14


@pytest.mark.parametrize("K", BACKENDS)
def test_splat_sample_adjoint(K):
    # <splat(v), G> == <v, sample(G)> for in- and out-of-bounds coords
    rng = np.random.default_rng(5)
    dims = (5, 6, 7)
    for trial in range(20):
        grid = _c(rng.standard_normal((2,) + dims))
        coords = _c(rng.uniform(-1.5, 8.0, size=(30, 3)))
        values = _c(rng.standard_normal((30, 2)))
        s = K.sample3d(grid, coords)
        sp = K.splat3d(values, coords, dims)
        lhs = float(np.sum(sp * grid))
        rhs = float(np.sum(values * s))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("K", BACKENDS)
def test_splat3d_mass_conserved_inside(K):
    # fully interior points deposit their whole value
    rng = np.random.default_rng(6)
    dims = (6, 6, 6)
    coords = _c(rng.uniform(0.6, 4.4, size=(12, 3)))
    values = _c(rng.standard_normal((12, 3)))
    out = K.splat3d(values, coords, dims)
    for ch in range(3):
        assert abs(out[ch].sum() - values[:, ch].sum()) < 1e-12


@pytest.mark.parametrize("K", BACKENDS)
def test_sample3d_coord_grad_fd(K):
    rng = np.random.default_rng(7)
    grid = _c(rng.standard_normal((2, 5, 5, 5)))
    # keep away from lattice planes where the map is not differentiable
    coords = _c(rng.uniform(0.55, 3.45, size=(8, 3)))
    gout = _c(rng.standard_normal((8, 2)))
    got = K.sample3d_vjp_coords(grid, coords, gout)
    eps = 1e-6
    for n in range(coords.shape[0]):
        for ax in range(3):
            cp = coords.copy()
            cp[n, ax] += eps
            cm = coords.copy()
            cm[n, ax] -= eps
            fp = float(np.sum(K.sample3d(grid, cp) * gout))
            fm = float(np.sum(K.sample3d(grid, cm) * gout))
            fd = (fp - fm) / (2 * eps)
            assert abs(fd - got[n, ax]) < 1e-6, (n, ax)


@pytest.mark.parametrize("K", BACKENDS)
def test_splat3d_coord_grad_fd(K):
    rng = np.random.default_rng(8)
    dims = (5, 5, 5)
    values = _c(rng.standard_normal((8, 2)))
    coords = _c(rng.uniform(0.55, 3.45, size=(8, 3)))
    ggrid = _c(rng.standard_normal((2,) + dims))
    got = K.splat3d_vjp_coords(values, coords, ggrid)
    eps = 1e-6
    for n in range(coords.shape[0]):
        for ax in range(3):
            cp = coords.copy()
            cp[n, ax] += eps
            cm = coords.copy()
            cm[n, ax] -= eps
            fp = float(np.sum(K.splat3d(values, cp, dims) * ggrid))
            fm = float(np.sum(K.splat3d(values, cm, dims) * ggrid))
            fd = (fp - fm) / (2 * eps)
            assert abs(fd - got[n, ax]) < 1e-6, (n, ax)


# ---------------------------------------------------------------------------
# convolution against a pure-python loop oracle

def _conv3d_loops(x, k, stride, pad):
    B, Ci, W, H, D = x.shape
    Co, _, K, _, _ = k.shape
    xp = np.zeros((B, Ci, W + 2 * pad, H + 2 * pad, D + 2 * pad))
    xp[:, :, pad:pad + W, pad:pad + H, pad:pad + D] = x
    ow = (W + 2 * pad - K) // stride + 1
    oh = (H + 2 * pad - K) // stride + 1
    od = (D + 2 * pad - K) // stride + 1
    y = np.zeros((B, Co, ow, oh, od))
    for b in range(B):
        for co in range(Co):
            for i in range(ow):
                for j in range(oh):
                    for l in range(od):
                        acc = 0.0
                        for ci in range(Ci):
                            for a in range(K):
                                for c in range(K):
                                    for e in range(K):
                                        acc += (xp[b, ci, i * stride + a,
                                                   j * stride + c, l * stride + e]
                                                * k[co, ci, a, c, e])
                        y[b, co, i, j, l] = acc
    return y


def _conv2d_loops(x, k, stride, pad):
    B, Ci, H, W = x.shape
    Co, _, K, _ = k.shape
    xp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    oh = (H + 2 * pad - K) // stride + 1
    ow = (W + 2 * pad - K) // stride + 1
    y = np.zeros((B, Co, oh, ow))
    for b in range(B):
        for co in range(Co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(Ci):
                        for a in range(K):
                            for c in range(K):
                                acc += xp[b, ci, i * stride + a, j * stride + c] * k[co, ci, a, c]
                    y[b, co, i, j] = acc
    return y


@pytest.mark.parametrize("K", BACKENDS)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_fwd_oracle(K, stride, pad):
    rng = np.random.default_rng(21)
    x = _c(rng.standard_normal((2, 3, 5, 4, 6)))
    k = _c(rng.standard_normal((4, 3, 3, 3, 3)))
    got = K.conv3d_fwd(x, k, stride, pad)
    want = _conv3d_loops(x, k, stride, pad)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-11


@pytest.mark.parametrize("K", BACKENDS)
def test_conv3d_box_filter_center(K):
    # ones kernel over 0..26 input sums everything at the center
    x = _c(np.arange(27.0).reshape(1, 1, 3, 3, 3))
    k = _c(np.ones((1, 1, 3, 3, 3)))
    y = K.conv3d_fwd(x, k, 1, 1)
    assert y.shape == (1, 1, 3, 3, 3)
    assert abs(y[0, 0, 1, 1, 1] - 351.0) < 1e-12


@pytest.mark.parametrize("K", BACKENDS)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv3d_vjps_fd(K, stride, pad):
    rng = np.random.default_rng(22)
    x = _c(rng.standard_normal((1, 2, 4, 4, 4)))
    k = _c(rng.standard_normal((3, 2, 3, 3, 3)))
    g = _c(rng.standard_normal(K.conv3d_fwd(x, k, stride, pad).shape))

    gx = K.conv3d_vjp_x(g, k, x.shape[2:], stride, pad)
    gk = K.conv3d_vjp_k(x, g, 3, stride, pad)

    eps = 1e-6
    rs = np.random.default_rng(23)
    dx = _c(rs.standard_normal(x.shape))
    fd = (np.sum(K.conv3d_fwd(x + eps * dx, k, stride, pad) * g)
          - np.sum(K.conv3d_fwd(x - eps * dx, k, stride, pad) * g)) / (2 * eps)
    assert abs(fd - np.sum(gx * dx)) < 1e-6

    dk = _c(rs.standard_normal(k.shape))
    fd = (np.sum(K.conv3d_fwd(x, k + eps * dk, stride, pad) * g)
          - np.sum(K.conv3d_fwd(x, k - eps * dk, stride, pad) * g)) / (2 * eps)
    assert abs(fd - np.sum(gk * dk)) < 1e-6


@pytest.mark.parametrize("K", BACKENDS)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_fwd_oracle(K, stride, pad):
    rng = np.random.default_rng(24)
    x = _c(rng.standard_normal((2, 3, 6, 5)))
    k = _c(rng.standard_normal((4, 3, 3, 3)))
    got = K.conv2d_fwd(x, k, stride, pad)
    want = _conv2d_loops(x, k, stride, pad)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-12


@pytest.mark.parametrize("K", BACKENDS)
def test_conv2d_vjps_fd(K):
    rng = np.random.default_rng(25)
    x = _c(rng.standard_normal((1, 2, 5, 5)))
    k = _c(rng.standard_normal((3, 2, 3, 3)))
    g = _c(rng.standard_normal(K.conv2d_fwd(x, k, 1, 1).shape))
    gx = K.conv2d_vjp_x(g, k, x.shape[2:], 1, 1)
    gk = K.conv2d_vjp_k(x, g, 3, 1, 1)
    eps = 1e-6
    rs = np.random.default_rng(26)
    dx = _c(rs.standard_normal(x.shape))
    fd = (np.sum(K.conv2d_fwd(x + eps * dx, k, 1, 1) * g)
          - np.sum(K.conv2d_fwd(x - eps * dx, k, 1, 1) * g)) / (2 * eps)
    assert abs(fd - np.sum(gx * dx)) < 1e-6
    dk = _c(rs.standard_normal(k.shape))
    fd = (np.sum(K.conv2d_fwd(x, k + eps * dk, 1, 1) * g)
          - np.sum(K.conv2d_fwd(x, k - eps * dk, 1, 1) * g)) / (2 * eps)
    assert abs(fd - np.sum(gk * dk)) < 1e-6


# ---------------------------------------------------------------------------
# backend agreement

def _scene_args(rng, height=48, width=48):
    cam_o = np.array([0.7, -0.3, 0.55])
    fwd = np.array([0.0, 0.0, 0.1]) - cam_o
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    th = 0.4
    c, s = np.cos(th), np.sin(th)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    body_type = np.array([0, 1], dtype=np.int64)
    body_half = np.array([[0.05, 0.04, 0.03], [0.035, 0.045, 0.0]])
    body_rot = np.ascontiguousarray(np.stack([Rz.T, np.eye(3)]))
    body_pos = np.array([[0.02, -0.01, 0.03], [0.13, 0.06, 0.045]])
    body_color = np.array([[0.8, 0.25, 0.2], [0.2, 0.5, 0.85]])
    light = np.array([-0.3, 0.25, -0.9])
    light /= np.linalg.norm(light)
    return (cam_o, np.ascontiguousarray(R), 70.0, 70.0,
            (width - 1) / 2.0, (height - 1) / 2.0, height, width,
            body_type, body_half, body_rot, body_pos, body_color,
            0.5, light, 0.35)


@pytest.mark.skipif(not HAVE_JIT, reason="numba backend unavailable")
def test_backends_agree_grid_ops():
    rng = np.random.default_rng(31)
    dims = (6, 5, 7)
    grid = _c(rng.standard_normal((3,) + dims))
    coords = _c(rng.uniform(-1.0, 7.5, size=(50, 3)))
    values = _c(rng.standard_normal((50, 3)))
    gout = _c(rng.standard_normal((50, 3)))
    ggrid = _c(rng.standard_normal((3,) + dims))
    assert np.abs(cpu.sample3d(grid, coords) - jit.sample3d(grid, coords)).max() < 1e-12
    assert np.abs(cpu.splat3d(values, coords, dims) - jit.splat3d(values, coords, dims)).max() < 1e-12
    assert np.abs(cpu.sample3d_vjp_coords(grid, coords, gout)
                  - jit.sample3d_vjp_coords(grid, coords, gout)).max() < 1e-12
    assert np.abs(cpu.splat3d_vjp_coords(values, coords, ggrid)
                  - jit.splat3d_vjp_coords(values, coords, ggrid)).max() < 1e-12


@pytest.mark.skipif(not HAVE_JIT, reason="numba backend unavailable")
def test_backends_agree_conv():
    rng = np.random.default_rng(32)
    x = _c(rng.standard_normal((2, 4, 8, 8, 8)))
    k = _c(rng.standard_normal((5, 4, 3, 3, 3)))
    for stride, pad in [(1, 1), (2, 1)]:
        a = cpu.conv3d_fwd(x, k, stride, pad)
        b = jit.conv3d_fwd(x, k, stride, pad)
        assert np.abs(a - b).max() < 1e-11
        g = _c(rng.standard_normal(a.shape))
        assert np.abs(cpu.conv3d_vjp_x(g, k, (8, 8, 8), stride, pad)
                      - jit.conv3d_vjp_x(g, k, (8, 8, 8), stride, pad)).max() < 1e-11
        assert np.abs(cpu.conv3d_vjp_k(x, g, 3, stride, pad)
                      - jit.conv3d_vjp_k(x, g, 3, stride, pad)).max() < 1e-10


@pytest.mark.skipif(not HAVE_JIT, reason="numba backend unavailable")
def test_backends_agree_raycast():
    rng = np.random.default_rng(33)
    args = _scene_args(rng)
    d1, c1 = cpu.raycast(*args)
    d2, c2 = jit.raycast(*args)
    assert np.abs(d1 - d2).max() < 1e-9
    assert np.abs(c1 - c2).max() < 1e-9


# ---------------------------------------------------------------------------
# raycast analytic checks (reference backend)

def test_raycast_straight_down_box():
    # camera looking straight down at a box: depth = cam z - box top
    cam_o = np.array([0.0, 0.0, 1.0])
    R = np.array([[1.0, 0.0, 0.0],
                  [0.0, -1.0, 0.0],
                  [0.0, 0.0, -1.0]])  # +z cam forward = world -z
    body_type = np.array([0], dtype=np.int64)
    body_half = np.array([[0.05, 0.05, 0.04]])
    body_rot = np.ascontiguousarray(np.eye(3)[None])
    body_pos = np.array([[0.0, 0.0, 0.04]])
    body_color = np.array([[1.0, 0.0, 0.0]])
    light = np.array([0.0, 0.0, -1.0])
    depth, rgb = cpu.raycast(cam_o, R, 70.0, 70.0, 31.5, 31.5, 64, 64,
                             body_type, body_half, body_rot, body_pos,
                             body_color, 0.5, light, 0.3)
    # center four pixels hit the top face at z = 0.08
    for v, u in [(31, 31), (31, 32), (32, 31), (32, 32)]:
        assert abs(depth[v, u] - 0.92) < 1e-9
        # top face normal +z, light straight down: full brightness red
        assert abs(rgb[v, u, 0] - 1.0) < 1e-9
        assert rgb[v, u, 1] == 0.0
    # a corner pixel falls on the table plane at z = 0
    assert abs(depth[0, 0] - 1.0) < 1e-9


def test_raycast_cylinder_profile():
    # side view of a cylinder: nearest depth is dist - radius
    cam_o = np.array([0.5, 0.0, 0.05])
    fwd = np.array([-1.0, 0.0, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    body_type = np.array([1], dtype=np.int64)
    body_half = np.array([[0.04, 0.05, 0.0]])
    body_rot = np.ascontiguousarray(np.eye(3)[None])
    body_pos = np.array([[0.0, 0.0, 0.05]])
    body_color = np.array([[0.0, 1.0, 0.0]])
    light = np.array([0.0, 0.0, -1.0])
    depth, rgb = cpu.raycast(cam_o, R, 70.0, 70.0, 31.5, 31.5, 64, 64,
                             body_type, body_half, body_rot, body_pos,
                             body_color, 0.5, light, 0.3)
    center = depth[31:33, 31:33]
    assert np.all(center > 0)
    assert np.abs(center - 0.46).max() < 1e-3


def test_raycast_miss_gives_sky():
    cam_o = np.array([0.0, 0.0, 0.5])
    fwd = np.array([0.0, 0.0, 1.0])  # looking up
    up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    body_type = np.zeros(0, dtype=np.int64)
    depth, rgb = cpu.raycast(cam_o, R, 70.0, 70.0, 15.5, 15.5, 32, 32,
                             body_type, np.zeros((0, 3)), np.zeros((0, 3, 3)),
                             np.zeros((0, 3)), np.zeros((0, 3)),
                             0.5, np.array([0.0, 0.0, -1.0]), 0.3)
    assert np.all(depth == 0.0)
    assert np.all(rgb == np.array([0.12, 0.14, 0.18]))
