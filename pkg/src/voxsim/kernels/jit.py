"""Numba jit kernels, drop-in replacements for the numpy fallbacks.

Same layout conventions as kernels.cpu.  All kernels run sequentially
(no prange) so results are deterministic for a fixed build; nogil lets
the planner score action samples from multiple threads.
"""

import math

import numpy as np
import numba as nb

BACKEND = "numba"

_JIT = dict(cache=True, nogil=True, fastmath=True)


@nb.njit(**_JIT)
def sample3d(grid, coords):
    C, W, H, D = grid.shape
    N = coords.shape[0]
    out = np.zeros((N, C), dtype=grid.dtype)
    for n in range(N):
        x = coords[n, 0]
        y = coords[n, 1]
        z = coords[n, 2]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        z0 = int(math.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        for dx in range(2):
            xi = x0 + dx
            if xi < 0 or xi >= W:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= H:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dz in range(2):
                    zi = z0 + dz
                    if zi < 0 or zi >= D:
                        continue
                    w = wx * wy * (fz if dz == 1 else 1.0 - fz)
                    for c in range(C):
                        out[n, c] += w * grid[c, xi, yi, zi]
    return out


@nb.njit(**_JIT)
def splat3d(values, coords, dims):
    W, H, D = dims
    N, C = values.shape
    out = np.zeros((C, W, H, D), dtype=values.dtype)
    for n in range(N):
        x = coords[n, 0]
        y = coords[n, 1]
        z = coords[n, 2]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        z0 = int(math.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        for dx in range(2):
            xi = x0 + dx
            if xi < 0 or xi >= W:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= H:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dz in range(2):
                    zi = z0 + dz
                    if zi < 0 or zi >= D:
                        continue
                    w = wx * wy * (fz if dz == 1 else 1.0 - fz)
                    for c in range(C):
                        out[c, xi, yi, zi] += w * values[n, c]
    return out


@nb.njit(**_JIT)
def sample3d_vjp_coords(grid, coords, gout):
    C, W, H, D = grid.shape
    N = coords.shape[0]
    gc = np.zeros((N, 3), dtype=grid.dtype)
    for n in range(N):
        x = coords[n, 0]
        y = coords[n, 1]
        z = coords[n, 2]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        z0 = int(math.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        for dx in range(2):
            xi = x0 + dx
            if xi < 0 or xi >= W:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            sx = 1.0 if dx == 1 else -1.0
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= H:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                sy = 1.0 if dy == 1 else -1.0
                for dz in range(2):
                    zi = z0 + dz
                    if zi < 0 or zi >= D:
                        continue
                    wz = fz if dz == 1 else 1.0 - fz
                    sz = 1.0 if dz == 1 else -1.0
                    dot = 0.0
                    for c in range(C):
                        dot += grid[c, xi, yi, zi] * gout[n, c]
                    gc[n, 0] += sx * wy * wz * dot
                    gc[n, 1] += sy * wx * wz * dot
                    gc[n, 2] += sz * wx * wy * dot
    return gc


@nb.njit(**_JIT)
def splat3d_vjp_coords(values, coords, ggrid):
    C, W, H, D = ggrid.shape
    N = coords.shape[0]
    gc = np.zeros((N, 3), dtype=values.dtype)
    for n in range(N):
        x = coords[n, 0]
        y = coords[n, 1]
        z = coords[n, 2]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        z0 = int(math.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        for dx in range(2):
            xi = x0 + dx
            if xi < 0 or xi >= W:
                continue
            wx = fx if dx == 1 else 1.0 - fx
            sx = 1.0 if dx == 1 else -1.0
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= H:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                sy = 1.0 if dy == 1 else -1.0
                for dz in range(2):
                    zi = z0 + dz
                    if zi < 0 or zi >= D:
                        continue
                    wz = fz if dz == 1 else 1.0 - fz
                    sz = 1.0 if dz == 1 else -1.0
                    dot = 0.0
                    for c in range(C):
                        dot += ggrid[c, xi, yi, zi] * values[n, c]
                    gc[n, 0] += sx * wy * wz * dot
                    gc[n, 1] += sy * wx * wz * dot
                    gc[n, 2] += sz * wx * wy * dot
    return gc


def sample3d_vjp_grid(coords, gout, dims):
    return splat3d(gout, coords, dims)


def splat3d_vjp_values(coords, ggrid):
    return sample3d(ggrid, coords)


# Convolutions run as im2col plus one GEMM per batch element; numba
# lowers 2-d np.dot to BLAS, which is where the throughput is on a
# single core.  The patch matrix is rebuilt per batch element so every
# entry is overwritten, including the zero padding.


@nb.njit(**_JIT)
def _im2col3d(xb, cols, K, stride, pad):
    Ci, W, H, D = xb.shape
    Wo = (W + 2 * pad - K) // stride + 1
    Ho = (H + 2 * pad - K) // stride + 1
    Do = (D + 2 * pad - K) // stride + 1
    p = 0
    for ci in range(Ci):
        for i in range(K):
            for j in range(K):
                for l in range(K):
                    row = cols[p]
                    p += 1
                    n = 0
                    for wo in range(Wo):
                        wi = wo * stride - pad + i
                        if wi < 0 or wi >= W:
                            for _ in range(Ho * Do):
                                row[n] = 0.0
                                n += 1
                            continue
                        for ho in range(Ho):
                            hi = ho * stride - pad + j
                            if hi < 0 or hi >= H:
                                for _ in range(Do):
                                    row[n] = 0.0
                                    n += 1
                                continue
                            xrow = xb[ci, wi, hi]
                            for do in range(Do):
                                di = do * stride - pad + l
                                if di < 0 or di >= D:
                                    row[n] = 0.0
                                else:
                                    row[n] = xrow[di]
                                n += 1


@nb.njit(**_JIT)
def _col2im3d(cols, gxb, K, stride, pad):
    Ci, W, H, D = gxb.shape
    Wo = (W + 2 * pad - K) // stride + 1
    Ho = (H + 2 * pad - K) // stride + 1
    Do = (D + 2 * pad - K) // stride + 1
    p = 0
    for ci in range(Ci):
        for i in range(K):
            for j in range(K):
                for l in range(K):
                    row = cols[p]
                    p += 1
                    n = 0
                    for wo in range(Wo):
                        wi = wo * stride - pad + i
                        if wi < 0 or wi >= W:
                            n += Ho * Do
                            continue
                        for ho in range(Ho):
                            hi = ho * stride - pad + j
                            if hi < 0 or hi >= H:
                                n += Do
                                continue
                            gxrow = gxb[ci, wi, hi]
                            for do in range(Do):
                                di = do * stride - pad + l
                                if 0 <= di < D:
                                    gxrow[di] += row[n]
                                n += 1


@nb.njit(**_JIT)
def conv3d_fwd(x, k, stride, pad):
    B, Ci, W, H, D = x.shape
    Co = k.shape[0]
    K = k.shape[2]
    Wo = (W + 2 * pad - K) // stride + 1
    Ho = (H + 2 * pad - K) // stride + 1
    Do = (D + 2 * pad - K) // stride + 1
    P = Ci * K * K * K
    N = Wo * Ho * Do
    km = k.copy().reshape(Co, P)
    cols = np.empty((P, N), dtype=x.dtype)
    y = np.empty((B, Co, Wo, Ho, Do), dtype=x.dtype)
    for b in range(B):
        _im2col3d(x[b], cols, K, stride, pad)
        y[b] = np.dot(km, cols).reshape(Co, Wo, Ho, Do)
    return y


@nb.njit(**_JIT)
def conv3d_vjp_k(x, gy, K, stride, pad):
    B, Ci, W, H, D = x.shape
    Co = gy.shape[1]
    Wo, Ho, Do = gy.shape[2], gy.shape[3], gy.shape[4]
    P = Ci * K * K * K
    N = Wo * Ho * Do
    cols = np.empty((P, N), dtype=x.dtype)
    gk = np.zeros((Co, P), dtype=x.dtype)
    for b in range(B):
        _im2col3d(x[b], cols, K, stride, pad)
        gym = gy[b].copy().reshape(Co, N)
        gk += np.dot(gym, cols.T)
    return gk.reshape(Co, Ci, K, K, K)


@nb.njit(**_JIT)
def conv3d_vjp_x(gy, k, x_spatial, stride, pad):
    B, Co, Wo, Ho, Do = gy.shape
    Ci = k.shape[1]
    K = k.shape[2]
    W, H, D = x_spatial
    P = Ci * K * K * K
    N = Wo * Ho * Do
    km = k.copy().reshape(Co, P)
    gx = np.zeros((B, Ci, W, H, D), dtype=gy.dtype)
    for b in range(B):
        gym = gy[b].copy().reshape(Co, N)
        cols = np.dot(km.T, gym)
        _col2im3d(cols, gx[b], K, stride, pad)
    return gx


@nb.njit(**_JIT)
def _im2col2d(xb, cols, K, stride, pad):
    Ci, H, W = xb.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    p = 0
    for ci in range(Ci):
        for i in range(K):
            for j in range(K):
                row = cols[p]
                p += 1
                n = 0
                for ho in range(Ho):
                    hi = ho * stride - pad + i
                    if hi < 0 or hi >= H:
                        for _ in range(Wo):
                            row[n] = 0.0
                            n += 1
                        continue
                    xrow = xb[ci, hi]
                    for wo in range(Wo):
                        wi = wo * stride - pad + j
                        if wi < 0 or wi >= W:
                            row[n] = 0.0
                        else:
                            row[n] = xrow[wi]
                        n += 1


@nb.njit(**_JIT)
def _col2im2d(cols, gxb, K, stride, pad):
    Ci, H, W = gxb.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    p = 0
    for ci in range(Ci):
        for i in range(K):
            for j in range(K):
                row = cols[p]
                p += 1
                n = 0
                for ho in range(Ho):
                    hi = ho * stride - pad + i
                    if hi < 0 or hi >= H:
                        n += Wo
                        continue
                    gxrow = gxb[ci, hi]
                    for wo in range(Wo):
                        wi = wo * stride - pad + j
                        if 0 <= wi < W:
                            gxrow[wi] += row[n]
                        n += 1


@nb.njit(**_JIT)
def conv2d_fwd(x, k, stride, pad):
    B, Ci, H, W = x.shape
    Co = k.shape[0]
    K = k.shape[2]
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W + 2 * pad - K) // stride + 1
    P = Ci * K * K
    N = Ho * Wo
    km = k.copy().reshape(Co, P)
    cols = np.empty((P, N), dtype=x.dtype)
    y = np.empty((B, Co, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        _im2col2d(x[b], cols, K, stride, pad)
        y[b] = np.dot(km, cols).reshape(Co, Ho, Wo)
    return y


@nb.njit(**_JIT)
def conv2d_vjp_k(x, gy, K, stride, pad):
    B, Ci, H, W = x.shape
    Co = gy.shape[1]
    Ho, Wo = gy.shape[2], gy.shape[3]
    P = Ci * K * K
    N = Ho * Wo
    cols = np.empty((P, N), dtype=x.dtype)
    gk = np.zeros((Co, P), dtype=x.dtype)
    for b in range(B):
        _im2col2d(x[b], cols, K, stride, pad)
        gym = gy[b].copy().reshape(Co, N)
        gk += np.dot(gym, cols.T)
    return gk.reshape(Co, Ci, K, K)


@nb.njit(**_JIT)
def conv2d_vjp_x(gy, k, x_spatial, stride, pad):
    B, Co, Ho, Wo = gy.shape
    Ci = k.shape[1]
    K = k.shape[2]
    H, W = x_spatial
    P = Ci * K * K
    N = Ho * Wo
    km = k.copy().reshape(Co, P)
    gx = np.zeros((B, Ci, H, W), dtype=gy.dtype)
    for b in range(B):
        gym = gy[b].copy().reshape(Co, N)
        cols = np.dot(km.T, gym)
        _col2im2d(cols, gx[b], K, stride, pad)
    return gx


@nb.njit(**_JIT)
def _ray_box_one(ox, oy, oz, dx, dy, dz, hx, hy, hz):
    big = 1e30
    tn = -big
    tf = big
    axis = 0
    if abs(dx) < 1e-12:
        if abs(ox) > hx:
            return big, 0, 0.0
    else:
        t1 = (-hx - ox) / dx
        t2 = (hx - ox) / dx
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tn:
            tn = t1
            axis = 0
        if t2 < tf:
            tf = t2
    if abs(dy) < 1e-12:
        if abs(oy) > hy:
            return big, 0, 0.0
    else:
        t1 = (-hy - oy) / dy
        t2 = (hy - oy) / dy
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tn:
            tn = t1
            axis = 1
        if t2 < tf:
            tf = t2
    if abs(dz) < 1e-12:
        if abs(oz) > hz:
            return big, 0, 0.0
    else:
        t1 = (-hz - oz) / dz
        t2 = (hz - oz) / dz
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tn:
            tn = t1
            axis = 2
        if t2 < tf:
            tf = t2
    if tn > tf or tf <= 0.0 or tn <= 1e-6:
        return big, 0, 0.0
    if axis == 0:
        pt = ox + tn * dx
    elif axis == 1:
        pt = oy + tn * dy
    else:
        pt = oz + tn * dz
    sign = 1.0 if pt >= 0 else -1.0
    return tn, axis, sign


@nb.njit(**_JIT)
def raycast(cam_origin, cam_rot, fx, fy, cx, cy, height, width,
            body_type, body_half, body_rot, body_pos, body_color,
            table_half, light_dir, ambient):
    depth = np.zeros((height, width), dtype=np.float64)
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    big = 1e30
    ln = math.sqrt(light_dir[0] ** 2 + light_dir[1] ** 2 + light_dir[2] ** 2)
    lx, ly, lz = light_dir[0] / ln, light_dir[1] / ln, light_dir[2] / ln
    nb_ = body_type.shape[0]
    for v in range(height):
        for u in range(width):
            dcx = (u - cx) / fx
            dcy = (v - cy) / fy
            dwx = cam_rot[0, 0] * dcx + cam_rot[0, 1] * dcy + cam_rot[0, 2]
            dwy = cam_rot[1, 0] * dcx + cam_rot[1, 1] * dcy + cam_rot[1, 2]
            dwz = cam_rot[2, 0] * dcx + cam_rot[2, 1] * dcy + cam_rot[2, 2]
            t_best = big
            nx = ny = nz = 0.0
            cr = cg = cb = 0.0
            got = False
            # table plane
            if abs(dwz) > 1e-12:
                t = -cam_origin[2] / dwz
                if t > 1e-6:
                    px = cam_origin[0] + t * dwx
                    py = cam_origin[1] + t * dwy
                    if abs(px) <= table_half and abs(py) <= table_half:
                        t_best = t
                        nx, ny, nz = 0.0, 0.0, 1.0
                        cr, cg, cb = 0.62, 0.60, 0.58
                        got = True
            for b in range(nb_):
                R = body_rot[b]
                ox = ((cam_origin[0] - body_pos[b, 0]) * R[0, 0]
                      + (cam_origin[1] - body_pos[b, 1]) * R[0, 1]
                      + (cam_origin[2] - body_pos[b, 2]) * R[0, 2])
                oy = ((cam_origin[0] - body_pos[b, 0]) * R[1, 0]
                      + (cam_origin[1] - body_pos[b, 1]) * R[1, 1]
                      + (cam_origin[2] - body_pos[b, 2]) * R[1, 2])
                oz = ((cam_origin[0] - body_pos[b, 0]) * R[2, 0]
                      + (cam_origin[1] - body_pos[b, 1]) * R[2, 1]
                      + (cam_origin[2] - body_pos[b, 2]) * R[2, 2])
                dx = R[0, 0] * dwx + R[0, 1] * dwy + R[0, 2] * dwz
                dy = R[1, 0] * dwx + R[1, 1] * dwy + R[1, 2] * dwz
                dz = R[2, 0] * dwx + R[2, 1] * dwy + R[2, 2] * dwz
                if body_type[b] == 0:
                    t, axis, sign = _ray_box_one(ox, oy, oz, dx, dy, dz,
                                                 body_half[b, 0], body_half[b, 1],
                                                 body_half[b, 2])
                    if t < t_best:
                        bnx = sign if axis == 0 else 0.0
                        bny = sign if axis == 1 else 0.0
                        bnz = sign if axis == 2 else 0.0
                        nx = R[0, 0] * bnx + R[1, 0] * bny + R[2, 0] * bnz
                        ny = R[0, 1] * bnx + R[1, 1] * bny + R[2, 1] * bnz
                        nz = R[0, 2] * bnx + R[1, 2] * bny + R[2, 2] * bnz
                        cr, cg, cb = body_color[b, 0], body_color[b, 1], body_color[b, 2]
                        t_best = t
                        got = True
                else:
                    radius = body_half[b, 0]
                    half_h = body_half[b, 1]
                    a2 = dx * dx + dy * dy
                    bq = ox * dx + oy * dy
                    cq = ox * ox + oy * oy - radius * radius
                    t = big
                    bnx = bny = bnz = 0.0
                    if a2 > 1e-12:
                        disc = bq * bq - a2 * cq
                        if disc > 0.0:
                            ts = (-bq - math.sqrt(disc)) / a2
                            if ts > 1e-6 and abs(oz + ts * dz) <= half_h:
                                t = ts
                                bnx = (ox + ts * dx) / radius
                                bny = (oy + ts * dy) / radius
                    if abs(dz) > 1e-12:
                        for cap in range(2):
                            zc = half_h if cap == 0 else -half_h
                            tc = (zc - oz) / dz
                            if 1e-6 < tc < t:
                                rx = ox + tc * dx
                                ry = oy + tc * dy
                                if rx * rx + ry * ry <= radius * radius:
                                    t = tc
                                    bnx, bny = 0.0, 0.0
                                    bnz = 1.0 if cap == 0 else -1.0
                    if t < t_best:
                        nx = R[0, 0] * bnx + R[1, 0] * bny + R[2, 0] * bnz
                        ny = R[0, 1] * bnx + R[1, 1] * bny + R[2, 1] * bnz
                        nz = R[0, 2] * bnx + R[1, 2] * bny + R[2, 2] * bnz
                        cr, cg, cb = body_color[b, 0], body_color[b, 1], body_color[b, 2]
                        t_best = t
                        got = True
            if got:
                lam = -(nx * lx + ny * ly + nz * lz)
                if lam < 0.0:
                    lam = 0.0
                shade = ambient + (1.0 - ambient) * lam
                rr = cr * shade
                gg = cg * shade
                bb = cb * shade
                rgb[v, u, 0] = 1.0 if rr > 1.0 else rr
                rgb[v, u, 1] = 1.0 if gg > 1.0 else gg
                rgb[v, u, 2] = 1.0 if bb > 1.0 else bb
                depth[v, u] = t_best
            else:
                rgb[v, u, 0] = 0.12
                rgb[v, u, 1] = 0.14
                rgb[v, u, 2] = 0.18
    return depth, rgb
