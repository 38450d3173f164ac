"""Pure-numpy reference kernels.

These are the fallback implementations selected when the jit backend is
disabled or unavailable.  Layout conventions shared with the jit kernels:

  * feature grids are [C, W, H, D], C-contiguous
  * point coordinates are [N, 3] continuous voxel coordinates in the
    voxel-center convention (coordinate i lies at the center of cell i)
  * sampling reads zero outside the grid, splatting drops out-of-bounds
    corner contributions
  * convolutions take x [B, C_in, W, H, D] and kernels
    [C_out, C_in, K, K, K] with scalar stride and zero padding
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _corner_weights(coords):
    """Floor corners and trilinear fractions for a batch of coordinates."""
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    return base, frac


def sample3d(grid, coords):
    """Trilinear gather: grid [C,W,H,D], coords [N,3] -> values [N,C]."""
    C, W, H, D = grid.shape
    N = coords.shape[0]
    out = np.zeros((N, C), dtype=grid.dtype)
    base, frac = _corner_weights(coords)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        xi = base[:, 0] + dx
        okx = (xi >= 0) & (xi < W)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            yi = base[:, 1] + dy
            oky = okx & (yi >= 0) & (yi < H)
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                zi = base[:, 2] + dz
                ok = oky & (zi >= 0) & (zi < D)
                if not ok.any():
                    continue
                w = (wx * wy * wz)[ok]
                out[ok] += w[:, None] * grid[:, xi[ok], yi[ok], zi[ok]].T
    return out


def splat3d(values, coords, dims):
    """Trilinear scatter-add: values [N,C], coords [N,3] -> grid [C,W,H,D]."""
    W, H, D = dims
    C = values.shape[1]
    flat = np.zeros((W * H * D, C), dtype=values.dtype)
    base, frac = _corner_weights(coords)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        xi = base[:, 0] + dx
        okx = (xi >= 0) & (xi < W)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            yi = base[:, 1] + dy
            oky = okx & (yi >= 0) & (yi < H)
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                zi = base[:, 2] + dz
                ok = oky & (zi >= 0) & (zi < D)
                if not ok.any():
                    continue
                w = (wx * wy * wz)[ok]
                idx = (xi[ok] * H + yi[ok]) * D + zi[ok]
                np.add.at(flat, idx, w[:, None] * values[ok])
    return np.ascontiguousarray(flat.T.reshape(C, W, H, D))


def sample3d_vjp_coords(grid, coords, gout):
    """Gradient of sample3d w.r.t. coords: gout [N,C] -> [N,3]."""
    C, W, H, D = grid.shape
    N = coords.shape[0]
    gc = np.zeros((N, 3), dtype=grid.dtype)
    base, frac = _corner_weights(coords)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        sx = 1.0 if dx else -1.0
        xi = base[:, 0] + dx
        okx = (xi >= 0) & (xi < W)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            sy = 1.0 if dy else -1.0
            yi = base[:, 1] + dy
            oky = okx & (yi >= 0) & (yi < H)
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                sz = 1.0 if dz else -1.0
                zi = base[:, 2] + dz
                ok = oky & (zi >= 0) & (zi < D)
                if not ok.any():
                    continue
                # dot of upstream with the corner value, per point
                v = grid[:, xi[ok], yi[ok], zi[ok]].T  # [M, C]
                dot = np.sum(v * gout[ok], axis=1)
                gc[ok, 0] += sx * (wy * wz)[ok] * dot
                gc[ok, 1] += sy * (wx * wz)[ok] * dot
                gc[ok, 2] += sz * (wx * wy)[ok] * dot
    return gc


def splat3d_vjp_coords(values, coords, ggrid):
    """Gradient of splat3d w.r.t. coords: ggrid [C,W,H,D] -> [N,3]."""
    C, W, H, D = ggrid.shape
    N = coords.shape[0]
    gc = np.zeros((N, 3), dtype=values.dtype)
    base, frac = _corner_weights(coords)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        sx = 1.0 if dx else -1.0
        xi = base[:, 0] + dx
        okx = (xi >= 0) & (xi < W)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            sy = 1.0 if dy else -1.0
            yi = base[:, 1] + dy
            oky = okx & (yi >= 0) & (yi < H)
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                sz = 1.0 if dz else -1.0
                zi = base[:, 2] + dz
                ok = oky & (zi >= 0) & (zi < D)
                if not ok.any():
                    continue
                g = ggrid[:, xi[ok], yi[ok], zi[ok]].T  # [M, C]
                dot = np.sum(g * values[ok], axis=1)
                gc[ok, 0] += sx * (wy * wz)[ok] * dot
                gc[ok, 1] += sy * (wx * wz)[ok] * dot
                gc[ok, 2] += sz * (wx * wy)[ok] * dot
    return gc


# The two linear maps are exact adjoints of each other, so the value
# gradients reuse the forward kernels.

def sample3d_vjp_grid(coords, gout, dims):
    return splat3d(gout, coords, dims)


def splat3d_vjp_values(coords, ggrid):
    return sample3d(ggrid, coords)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv3d_fwd(x, k, stride, pad):
    B, Ci, W, H, D = x.shape
    Co, _, K, _, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (K, K, K), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    # [B, Wo, Ho, Do, Co]
    y = np.tensordot(win, k, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(y, 4, 1))


def conv3d_vjp_k(x, gy, K, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (K, K, K), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    # sum over batch and output positions -> [Ci, K, K, K, Co]
    gk = np.tensordot(win, gy, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(gk, 4, 0))


def conv3d_vjp_x(gy, k, x_spatial, stride, pad):
    B, Co, Wo, Ho, Do = gy.shape
    _, Ci, K, _, _ = k.shape
    W, H, D = x_spatial
    gxp = np.zeros((B, Ci, W + 2 * pad, H + 2 * pad, D + 2 * pad), dtype=gy.dtype)
    for i in range(K):
        for j in range(K):
            for l in range(K):
                # [B, Wo, Ho, Do, Ci]
                contrib = np.tensordot(gy, k[:, :, i, j, l], axes=([1], [0]))
                gxp[:, :, i:i + stride * Wo:stride,
                    j:j + stride * Ho:stride,
                    l:l + stride * Do:stride] += np.moveaxis(contrib, 4, 1)
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp)


def conv2d_fwd(x, k, stride, pad):
    B, Ci, H, W = x.shape
    Co, _, K, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(y, 3, 1))


def conv2d_vjp_k(x, gy, K, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    gk = np.tensordot(win, gy, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(gk, 3, 0))


def conv2d_vjp_x(gy, k, x_spatial, stride, pad):
    B, Co, Ho, Wo = gy.shape
    _, Ci, K, _ = k.shape
    H, W = x_spatial
    gxp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad), dtype=gy.dtype)
    for i in range(K):
        for j in range(K):
            contrib = np.tensordot(gy, k[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i:i + stride * Ho:stride,
                j:j + stride * Wo:stride] += np.moveaxis(contrib, 3, 1)
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp)


def raycast(cam_origin, cam_rot, fx, fy, cx, cy, height, width,
            body_type, body_half, body_rot, body_pos, body_color,
            table_half, light_dir, ambient):
    """Ray-cast box/cylinder primitives plus the table plane.

    Returns (depth [H,W] float, rgb [H,W,3] float in [0,1]).  Depth is the
    camera-frame z of the hit (rays use unnormalized direction with unit
    forward component), 0 where nothing is hit.
    """
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ cam_rot.T  # world-frame, unnormalized
    o = cam_origin

    big = np.float64(1e30)
    t_best = np.full((height, width), big)
    n_best = np.zeros((height, width, 3))
    c_best = np.zeros((height, width, 3))
    hit = np.zeros((height, width), dtype=bool)

    # table plane z = 0, normal +z, finite square extent
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pl = np.where(np.abs(dz) > 1e-12, (0.0 - o[2]) / dz, big)
    px = o[0] + t_pl * dirs[..., 0]
    py = o[1] + t_pl * dirs[..., 1]
    ok = (t_pl > 1e-6) & (np.abs(px) <= table_half) & (np.abs(py) <= table_half)
    t_best = np.where(ok, t_pl, t_best)
    hit |= ok
    n_best[ok] = (0.0, 0.0, 1.0)
    c_best[ok] = (0.62, 0.60, 0.58)

    for b in range(body_type.shape[0]):
        R = body_rot[b]          # world-to-body rotation matrix
        p = body_pos[b]
        ob = (o - p) @ R.T
        db = dirs @ R.T
        if body_type[b] == 0:
            t_b, n_b = _ray_box(ob, db, body_half[b])
        else:
            t_b, n_b = _ray_cylinder(ob, db, body_half[b, 0], body_half[b, 1])
        okb = (t_b > 1e-6) & (t_b < t_best)
        t_best = np.where(okb, t_b, t_best)
        hit |= okb
        n_best[okb] = n_b[okb] @ R  # rotate normal back to world
        c_best[okb] = body_color[b]

    light = light_dir / np.linalg.norm(light_dir)
    lam = np.maximum(0.0, -(n_best @ light))
    shade = ambient + (1.0 - ambient) * lam
    rgb = np.clip(c_best * shade[..., None], 0.0, 1.0)
    rgb[~hit] = (0.12, 0.14, 0.18)
    depth = np.where(hit, t_best, 0.0)
    return depth, rgb


def _ray_box(o, d, half):
    """Slab intersection with an axis-aligned box in its own frame."""
    big = 1e30
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(d) > 1e-12, 1.0 / d, big)
    t1 = (-half - o) * inv
    t2 = (half - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    valid = (tn <= tf) & (tf > 0) & (tn > 1e-6)
    t = np.where(valid, tn, big)
    n = np.zeros(d.shape)
    rows = np.nonzero(valid)
    if rows[0].size:
        a = axis[rows]
        pt = o + t[rows][..., None] * d[rows]  # o is a single point, broadcasts
        sign = np.sign(pt[np.arange(a.size), a])
        n[rows[0], rows[1], a] = np.where(sign == 0, 1.0, sign)
    return t, n


def _ray_cylinder(o, d, radius, half_h):
    """Intersection with a z-axis cylinder of given radius and half height."""
    big = 1e30
    ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - a * c
    t = np.full(dx.shape, big)
    n = np.zeros(d.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(np.maximum(disc, 0.0))
        t_side = np.where((disc > 0) & (a > 1e-12), (-b - root) / a, big)
    z_at = oz + t_side * dz
    ok_side = (t_side > 1e-6) & (np.abs(z_at) <= half_h) & (t_side < big / 2)
    t = np.where(ok_side, t_side, t)
    if ok_side.any():
        n[ok_side, 0] = (ox + t_side * dx)[ok_side] / radius
        n[ok_side, 1] = (oy + t_side * dy)[ok_side] / radius
    # caps
    for zcap, nz in ((half_h, 1.0), (-half_h, -1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = np.where(np.abs(dz) > 1e-12, (zcap - oz) / dz, big)
        rx = ox + t_cap * dx
        ry = oy + t_cap * dy
        ok_cap = ((t_cap > 1e-6) & (rx * rx + ry * ry <= radius * radius)
                  & (t_cap < t))
        t = np.where(ok_cap, t_cap, t)
        n[ok_cap] = (0.0, 0.0, nz)
    return t, n
