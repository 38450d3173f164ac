"""Kernel backend dispatch.

The hot numeric kernels exist twice: a numba jit build (kernels.jit) and a
pure-numpy fallback (kernels.cpu).  The active backend is chosen once at
import time from the VOXSIM_NUMBA environment variable:

  * "auto" (default): use numba when it imports, else fall back to numpy
  * "1" / "on":       require numba, raise if unavailable
  * "0" / "off":      force the numpy fallback

`voxsim bench` imports both modules directly to time them side by side.
"""

import os

from voxsim.kernels import cpu as _cpu

_FLAG = os.environ.get("VOXSIM_NUMBA", "auto").strip().lower()

if _FLAG in ("0", "off", "false", "numpy"):
    _impl = _cpu
elif _FLAG in ("1", "on", "true", "numba", "jit", "auto", ""):
    try:
        from voxsim.kernels import jit as _impl
    except ImportError:
        if _FLAG in ("1", "on", "true", "numba", "jit"):
            raise
        _impl = _cpu
else:
    raise ValueError(f"unrecognized VOXSIM_NUMBA value: {_FLAG!r}")

BACKEND = _impl.BACKEND

sample3d = _impl.sample3d
splat3d = _impl.splat3d
sample3d_vjp_grid = _impl.sample3d_vjp_grid
sample3d_vjp_coords = _impl.sample3d_vjp_coords
splat3d_vjp_values = _impl.splat3d_vjp_values
splat3d_vjp_coords = _impl.splat3d_vjp_coords
conv3d_fwd = _impl.conv3d_fwd
conv3d_vjp_x = _impl.conv3d_vjp_x
conv3d_vjp_k = _impl.conv3d_vjp_k
conv2d_fwd = _impl.conv2d_fwd
conv2d_vjp_x = _impl.conv2d_vjp_x
conv2d_vjp_k = _impl.conv2d_vjp_k
raycast = _impl.raycast
