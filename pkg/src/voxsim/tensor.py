"""Reverse-mode automatic differentiation on numpy arrays.

Define-by-run: executing an op while a Tape is active appends a backward
rule to that tape.  Tape.backward walks the records in reverse execution
order, which is a valid reverse topological order, accumulating into
Tensor.grad.  With no active tape ops run plain, with no recording cost.

Gradient checking is done in tests against central finite differences at
64 bits; training runs at 32 bits.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

from voxsim import kernels
from voxsim.errors import DataError, NumericError, ShapeError

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus a gradient slot.

    Data is treated as immutable after construction; only the optimizer
    rebinds parameter values.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise ShapeError(f"tensor dtype must be numeric, got {arr.dtype}")
        if arr.dtype.kind in "iu":
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ShapeError("zero-size tensors are not allowed")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of executed operations with their backward rules."""

    def __init__(self):
        self._records = []
        self._done = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out, vjp):
        out.requires_grad = True
        self._records.append((out, vjp))

    def __len__(self):
        return len(self._records)

    def backward(self, loss, seed=None):
        """Accumulate gradients of loss into every recorded input.

        loss must be scalar unless an explicit seed gradient is given.
        Reverse execution order guarantees every consumer of a tensor is
        processed before the tensor's own producing record.
        """
        if self._done:
            raise RuntimeError("tape already used for a backward pass")
        self._done = True
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        else:
            seed = np.asarray(seed, dtype=loss.data.dtype)
            if seed.shape != loss.data.shape:
                raise ShapeError("seed gradient shape must match the loss shape")
        _accumulate(loss, seed)
        for out, vjp in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            vjp(g)


def grad_enabled():
    return _active_tape() is not None


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _split(x):
    """Return (ndarray, Tensor-or-None) for a Tensor or constant input."""
    if isinstance(x, Tensor):
        return x.data, (x if x.requires_grad else None)
    return np.asarray(x), None


def _finish(out_data, contributions):
    """Wrap op output, recording a vjp if any input needs a gradient.

    contributions: list of (tensor_or_None, fn(g) -> gradient array).
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        live = [(t, fn) for t, fn in contributions if t is not None]
        if live:
            def vjp(g):
                for t, fn in live:
                    _accumulate(t, fn(g))
            tape.record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    out = ad + bd
    return _finish(out, [
        (at, lambda g: _unbroadcast(g, ad.shape)),
        (bt, lambda g: _unbroadcast(g, bd.shape)),
    ])


def sub(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    out = ad - bd
    return _finish(out, [
        (at, lambda g: _unbroadcast(g, ad.shape)),
        (bt, lambda g: _unbroadcast(-g, bd.shape)),
    ])


def mul(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    out = ad * bd
    return _finish(out, [
        (at, lambda g: _unbroadcast(g * bd, ad.shape)),
        (bt, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def div(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    out = ad / bd
    return _finish(out, [
        (at, lambda g: _unbroadcast(g / bd, ad.shape)),
        (bt, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    ])


def neg(a):
    ad, at = _split(a)
    return _finish(-ad, [(at, lambda g: -g)])


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def reshape(a, shape):
    ad, at = _split(a)
    old = ad.shape
    return _finish(ad.reshape(shape), [(at, lambda g: g.reshape(old))])


def transpose(a, axes):
    ad, at = _split(a)
    inv = np.argsort(axes)
    return _finish(np.ascontiguousarray(ad.transpose(axes)),
                   [(at, lambda g: np.ascontiguousarray(g.transpose(inv)))])


def concat(parts, axis=0):
    datas = []
    tens = []
    for p in parts:
        d, t = _split(p)
        datas.append(d)
        tens.append(t)
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    contributions = []
    for i, t in enumerate(tens):
        if t is None:
            contributions.append((None, None))
            continue
        lo, hi = offsets[i], offsets[i + 1]

        def piece(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        contributions.append((t, piece))
    return _finish(out, contributions)


def stack(parts, axis=0):
    datas = []
    tens = []
    for p in parts:
        d, t = _split(p)
        datas.append(d)
        tens.append(t)
    out = np.stack(datas, axis=axis)
    contributions = []
    for i, t in enumerate(tens):
        if t is None:
            contributions.append((None, None))
            continue

        def piece(g, i=i):
            return np.take(g, i, axis=axis)

        contributions.append((t, piece))
    return _finish(out, contributions)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    ad, at = _split(a)
    if start < 0 or start + length > ad.shape[axis]:
        raise ShapeError("narrow out of range")
    index = [slice(None)] * ad.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = ad.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return full

    return _finish(ad[index].copy(), [(at, back)])


def sum_(a, axis=None):
    ad, at = _split(a)
    out = ad.sum(axis=axis)
    shape = ad.shape

    def back(g):
        if axis is None:
            return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
        return np.broadcast_to(np.expand_dims(g, axis), shape).astype(g.dtype, copy=True)

    return _finish(out, [(at, back)])


def mean(a):
    ad, at = _split(a)
    n = ad.size
    return _finish(ad.mean(), [(at, lambda g: np.broadcast_to(g / n, ad.shape).astype(g.dtype, copy=True))])


def sqrt(a):
    ad, at = _split(a)
    if np.any(ad < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(ad)
    return _finish(out, [(at, lambda g: g * 0.5 / np.maximum(out, 1e-300))])


def leaky_relu(a, slope=0.01):
    ad, at = _split(a)
    out = np.where(ad > 0, ad, slope * ad)
    return _finish(out, [(at, lambda g: g * np.where(ad > 0, 1.0, slope).astype(g.dtype))])


def sigmoid(a):
    ad, at = _split(a)
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _finish(out, [(at, lambda g: g * out * (1.0 - out))])


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} vs {bd.shape}")
    out = ad @ bd
    return _finish(out, [
        (at, lambda g: g @ bd.T),
        (bt, lambda g: ad.T @ g),
    ])


def linear(x, w, b):
    """y[..., out] = x[..., in] @ w[in, out] + b[out]."""
    xd, xt = _split(x)
    wd, wt = _split(w)
    bd, bt = _split(b)
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear input dim {xd.shape[-1]} != weight rows {wd.shape[0]}")
    if bd.shape != (wd.shape[1],):
        raise ShapeError("bias shape must be (out,)")
    out = xd @ wd + bd
    x2 = xd.reshape(-1, xd.shape[-1])

    return _finish(out, [
        (xt, lambda g: g @ wd.T),
        (wt, lambda g: x2.T @ g.reshape(-1, g.shape[-1])),
        (bt, lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)),
    ])


def segment_sum_sorted(values, segments, n_segments):
    """Sum rows of values [N,F] into out [n_segments, F] by segment id.

    Rows within a segment are accumulated in an order sorted by their
    content, not their index, so relabeling the rows that feed a segment
    cannot change the result: the reduction sees the exact same float
    sequence.  Empty segments sum to zero.
    """
    vd, vt = _split(values)
    seg = np.asarray(segments, dtype=np.intp)
    if vd.ndim != 2 or seg.shape != (vd.shape[0],):
        raise ShapeError("segment_sum_sorted expects values [N,F], segments [N]")
    if np.any(seg < 0) or np.any(seg >= n_segments):
        raise ShapeError("segment id out of range")
    keys = tuple(vd[:, c] for c in range(vd.shape[1] - 1, -1, -1)) + (seg,)
    order = np.lexsort(keys)
    sv = np.ascontiguousarray(vd[order])
    ss = seg[order]
    out = np.zeros((n_segments, vd.shape[1]), dtype=vd.dtype)
    if len(ss):
        starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
        out[ss[starts]] = np.add.reduceat(sv, starts, axis=0)

    return _finish(out, [(vt, lambda g: g[seg])])


def vecnorm(x):
    """Row-wise Euclidean norm of a 2-d tensor, [N, K] -> [N].

    The gradient of a zero row is defined as zero, a valid subgradient,
    so losses built on vecnorm stay finite at a perfect fit.
    """
    xd, xt = _split(x)
    if xd.ndim != 2:
        raise ShapeError("vecnorm expects a 2-d input")
    out = np.sqrt(np.sum(xd * xd, axis=1))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (g / safe)[:, None] * xd

    return _finish(out, [(xt, vjp)])


# ---------------------------------------------------------------------------
# convolutions and pooling

def _as_c(a):
    return np.ascontiguousarray(a)


def conv3d(x, k, stride=1, padding=0):
    """3-d cross correlation.  x [C_in,W,H,D] or [B,C_in,W,H,D]."""
    xd, xt = _split(x)
    kd, kt = _split(k)
    squeeze = xd.ndim == 4
    if squeeze:
        xd = xd[None]
    if xd.ndim != 5 or kd.ndim != 5:
        raise ShapeError("conv3d expects x [B,C,W,H,D] and kernels [Co,Ci,K,K,K]")
    K = kd.shape[2]
    if kd.shape[3] != K or kd.shape[4] != K:
        raise ShapeError("conv3d kernels must be cubic")
    if K % 2 == 0:
        raise ShapeError("conv3d kernel size must be odd")
    if xd.shape[1] != kd.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: {xd.shape[1]} vs {kd.shape[1]}")
    spatial = xd.shape[2:]
    for s in spatial:
        if (s + 2 * padding - K) // stride + 1 <= 0:
            raise ShapeError("conv3d output dimension is not positive")
    # the kernels want one dtype throughout, including the vjp seed
    ct = np.promote_types(xd.dtype, kd.dtype)
    xd = np.ascontiguousarray(xd, dtype=ct)
    kd = np.ascontiguousarray(kd, dtype=ct)
    y = kernels.conv3d_fwd(xd, kd, stride, padding)

    def gx(g):
        g = np.ascontiguousarray(_expand(g, squeeze), dtype=ct)
        out = kernels.conv3d_vjp_x(g, kd, spatial, stride, padding)
        return out[0] if squeeze else out

    def gk(g):
        g = np.ascontiguousarray(_expand(g, squeeze), dtype=ct)
        return kernels.conv3d_vjp_k(xd, g, K, stride, padding)

    out = y[0] if squeeze else y
    return _finish(out, [(xt, gx), (kt, gk)])


def _expand(g, squeeze):
    return g[None] if squeeze else g


def conv2d(x, k, stride=1, padding=0):
    """2-d cross correlation.  x [C_in,H,W] or [B,C_in,H,W]."""
    xd, xt = _split(x)
    kd, kt = _split(k)
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError("conv2d expects x [B,C,H,W] and kernels [Co,Ci,K,K]")
    K = kd.shape[2]
    if kd.shape[3] != K:
        raise ShapeError("conv2d kernels must be square")
    if K % 2 == 0:
        raise ShapeError("conv2d kernel size must be odd")
    if xd.shape[1] != kd.shape[1]:
        raise ShapeError("conv2d channel mismatch")
    spatial = xd.shape[2:]
    for s in spatial:
        if (s + 2 * padding - K) // stride + 1 <= 0:
            raise ShapeError("conv2d output dimension is not positive")
    ct = np.promote_types(xd.dtype, kd.dtype)
    xd = np.ascontiguousarray(xd, dtype=ct)
    kd = np.ascontiguousarray(kd, dtype=ct)
    y = kernels.conv2d_fwd(xd, kd, stride, padding)

    def gx(g):
        g = np.ascontiguousarray(_expand(g, squeeze), dtype=ct)
        out = kernels.conv2d_vjp_x(g, kd, spatial, stride, padding)
        return out[0] if squeeze else out

    def gk(g):
        g = np.ascontiguousarray(_expand(g, squeeze), dtype=ct)
        return kernels.conv2d_vjp_k(xd, g, K, stride, padding)

    out = y[0] if squeeze else y
    return _finish(out, [(xt, gx), (kt, gk)])


def avg_pool3d_global(x):
    """Mean over the spatial dims: [C,W,H,D] -> [C] or [B,C,...] -> [B,C]."""
    xd, xt = _split(x)
    if xd.ndim not in (4, 5):
        raise ShapeError("avg_pool3d_global expects 4-d or 5-d input")
    axes = tuple(range(xd.ndim - 3, xd.ndim))
    n = 1
    for a in axes:
        n *= xd.shape[a]
    out = xd.mean(axis=axes)
    shape = xd.shape

    def back(g):
        g = g.reshape(g.shape + (1, 1, 1))
        return np.broadcast_to(g / n, shape).astype(g.dtype, copy=True)

    return _finish(out, [(xt, back)])


# ---------------------------------------------------------------------------
# trilinear grid ops

def grid_sample3d(grid, coords):
    """Trilinear gather: grid [C,W,H,D], coords [N,3] voxel units -> [N,C].

    Reads zero outside the grid.  Differentiable in both the grid values
    and the coordinates (away from the lattice planes).
    """
    gd, gt = _split(grid)
    cd, ct = _split(coords)
    if gd.ndim != 4 or cd.ndim != 2 or cd.shape[1] != 3:
        raise ShapeError("grid_sample3d expects grid [C,W,H,D], coords [N,3]")
    gd = _as_c(gd)
    cd = _as_c(cd.astype(gd.dtype, copy=False))
    out = kernels.sample3d(gd, cd)
    dims = gd.shape[1:]

    return _finish(out, [
        (gt, lambda g: kernels.sample3d_vjp_grid(cd, _as_c(g), dims)),
        (ct, lambda g: kernels.sample3d_vjp_coords(gd, cd, _as_c(g))),
    ])


def grid_splat3d(values, coords, dims):
    """Trilinear scatter-add of values [N,C] at coords [N,3] into [C,*dims].

    Out-of-bounds corner contributions are dropped.  Adjoint of
    grid_sample3d.
    """
    vd, vt = _split(values)
    cd, ct = _split(coords)
    if vd.ndim != 2 or cd.ndim != 2 or cd.shape[1] != 3 or vd.shape[0] != cd.shape[0]:
        raise ShapeError("grid_splat3d expects values [N,C], coords [N,3]")
    vd = _as_c(vd)
    cd = _as_c(cd.astype(vd.dtype, copy=False))
    out = kernels.splat3d(vd, cd, tuple(dims))

    return _finish(out, [
        (vt, lambda g: kernels.splat3d_vjp_values(cd, _as_c(g))),
        (ct, lambda g: kernels.splat3d_vjp_coords(vd, cd, _as_c(g))),
    ])


# ---------------------------------------------------------------------------
# quaternion ops (wxyz layout on the last axis)

def quat_mul(a, b):
    """Hamilton product on [..., 4]: rotation b applied first, then a."""
    ad, at = _split(a)
    bd, bt = _split(b)
    if ad.shape[-1] != 4 or bd.shape[-1] != 4:
        raise ShapeError("quat_mul expects [...,4] operands")
    aw, ax, ay, az = ad[..., 0], ad[..., 1], ad[..., 2], ad[..., 3]
    bw, bx, by, bz = bd[..., 0], bd[..., 1], bd[..., 2], bd[..., 3]
    out = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)

    def ga(g):
        gw, gx, gy, gz = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
        return np.stack([
            gw * bw + gx * bx + gy * by + gz * bz,
            -gw * bx + gx * bw - gy * bz + gz * by,
            -gw * by + gx * bz + gy * bw - gz * bx,
            -gw * bz - gx * by + gy * bx + gz * bw,
        ], axis=-1)

    def gb(g):
        gw, gx, gy, gz = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
        return np.stack([
            gw * aw + gx * ax + gy * ay + gz * az,
            -gw * ax + gx * aw + gy * az - gz * ay,
            -gw * ay - gx * az + gy * aw + gz * ax,
            -gw * az + gx * ay - gy * ax + gz * aw,
        ], axis=-1)

    return _finish(out, [(at, ga), (bt, gb)])


def quat_canonical(q, eps=1e-12):
    """Normalize [...,4] to unit length and flip sign so w >= 0.

    The sign flip is a piecewise-constant factor taken from the forward
    values, so gradients flow through the normalization only.
    """
    qd, qt = _split(q)
    if qd.shape[-1] != 4:
        raise ShapeError("quat_canonical expects [...,4]")
    norm = np.sqrt(np.sum(qd * qd, axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise NumericError("cannot normalize a near-zero quaternion")
    unit = qd / norm
    sign = np.where(unit[..., :1] < 0, -1.0, 1.0)
    out = unit * sign

    def back(g):
        gs = g * sign
        # d(unit)/dq = (I - unit unit^T) / norm
        proj = np.sum(gs * unit, axis=-1, keepdims=True)
        return (gs - unit * proj) / norm

    return _finish(out, [(qt, back)])


# ---------------------------------------------------------------------------
# losses

def mse(a, b):
    ad, at = _split(a)
    bd, bt = _split(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"mse shape mismatch: {ad.shape} vs {bd.shape}")
    diff = ad - bd
    n = diff.size
    out = np.asarray((diff * diff).mean())
    return _finish(out, [
        (at, lambda g: (2.0 / n) * g * diff),
        (bt, lambda g: (-2.0 / n) * g * diff),
    ])


def bce_with_logits(logits, targets, weights=None):
    """Mean binary cross entropy over all elements, numerically stable."""
    xd, xt = _split(logits)
    td, _ = _split(targets)
    if xd.shape != td.shape:
        raise ShapeError("bce_with_logits shape mismatch")
    if weights is None:
        wd = None
        wsum = xd.size
    else:
        wd = np.asarray(weights)
        wsum = wd.sum()
        if wsum <= 0:
            raise NumericError("bce weights sum to zero")
    # log(1 + exp(-|x|)) + max(x, 0) - x t
    softplus = np.log1p(np.exp(-np.abs(xd))) + np.maximum(xd, 0.0)
    per = softplus - xd * td
    if wd is not None:
        per = per * wd
    out = np.asarray(per.sum() / wsum)
    sig = 1.0 / (1.0 + np.exp(-np.clip(xd, -60, 60)))

    def back(g):
        gg = g * (sig - td) / wsum
        if wd is not None:
            gg = gg * wd
        return gg.astype(xd.dtype)

    return _finish(out, [(xt, back)])


# ---------------------------------------------------------------------------
# initialization, parameters, optimizer, checkpoints

def xavier_uniform(shape, rng, dtype=np.float32):
    """Glorot uniform init.  Fans for conv kernels use receptive-field size."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = 1
        for s in shape[2:]:
            receptive *= s
        fan_out = shape[0] * receptive
        fan_in = shape[1] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named trainable tensors plus Adam state, in creation order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def add(self, name, value):
        if name in self._params:
            raise ShapeError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros(t.data.shape, dtype=self.dtype)
        self._v[name] = np.zeros(t.data.shape, dtype=self.dtype)
        return t

    def xavier(self, name, shape, rng):
        return self.add(name, xavier_uniform(shape, rng, self.dtype))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape, dtype=self.dtype))

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def n_values(self):
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def adam_step(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        """One Adam update with bias correction over every parameter."""
        for name, p in self._params.items():
            if p.grad is None:
                raise NumericError(f"parameter {name!r} has no gradient")
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"parameter {name!r} has a non-finite gradient")
        self.step += 1
        b1t = 1.0 - beta1 ** self.step
        b2t = 1.0 - beta2 ** self.step
        for name, p in self._params.items():
            g = p.grad.astype(self.dtype, copy=False)
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            update = (lr / b1t) * m / (np.sqrt(v / b2t) + eps)
            p.data = p.data - update
        return self.step

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self._params.items()}
        return out

    def opt_state(self):
        state = {"__step__": np.array([float(self.step)])}
        for name in self._params:
            state["m." + name] = self._m[name].copy()
            state["v." + name] = self._v[name].copy()
        return state

    def load_values(self, values, strict=True):
        for name, arr in values.items():
            if name not in self._params:
                if strict:
                    raise DataError(f"checkpoint parameter {name!r} not in store")
                continue
            p = self._params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise DataError(f"checkpoint parameter {name!r} has shape "
                                f"{arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(self.dtype, copy=True)
        if strict:
            missing = [n for n in self._params if n not in values]
            if missing:
                raise DataError(f"checkpoint missing parameters: {missing}")

    def load_opt_state(self, state):
        step = state.get("__step__")
        if step is not None:
            self.step = int(step.reshape(-1)[0])
        for name in self._params:
            if "m." + name in state:
                self._m[name] = state["m." + name].astype(self.dtype, copy=True)
            if "v." + name in state:
                self._v[name] = state["v." + name].astype(self.dtype, copy=True)


# checkpoint binary format: magic, then two sections (parameters, optimizer
# state), each a u32 record count followed by records of
#   u32 name length, utf-8 name, u8 dtype code, u8 rank, u32 dims,
#   raw little-endian values

_MAGIC = b"OES1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_record(fh, name, arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR:
        arr = arr.astype(np.float64)
    code = _CODE_FOR[arr.dtype]
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def _read_record(fh):
    raw = fh.read(4)
    if len(raw) < 4:
        raise DataError("truncated checkpoint record")
    (nlen,) = struct.unpack("<I", raw)
    name = fh.read(nlen).decode("utf-8")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _DTYPE_CODES:
        raise DataError(f"unknown dtype code {code} in checkpoint")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    dt = _DTYPE_CODES[code]
    count = 1
    for d in dims:
        count *= d
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise DataError("truncated checkpoint values")
    return name, np.frombuffer(buf, dtype=dt).reshape(dims).copy()


def save_checkpoint(path, params, opt_state=None):
    """Write named arrays and optional optimizer state to an OES1 file."""
    opt_state = opt_state or {}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            _write_record(fh, name, arr)
        fh.write(struct.pack("<I", len(opt_state)))
        for name, arr in opt_state.items():
            _write_record(fh, name, arr)


def load_checkpoint(path):
    """Read an OES1 file -> (params dict, optimizer state dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (n,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n):
            name, arr = _read_record(fh)
            params[name] = arr
        raw = fh.read(4)
        opt = {}
        if len(raw) == 4:
            (m,) = struct.unpack("<I", raw)
            for _ in range(m):
                name, arr = _read_record(fh)
                opt[name] = arr
    return params, opt
