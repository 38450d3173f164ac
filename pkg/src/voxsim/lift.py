"""Lifting posed RGB-D views into a fused 3-d scene grid.

Every depth pixel unprojects to a world point; its color is splatted
trilinearly into a raw grid of weighted color sums plus a weight
channel.  Views fuse by summing their raw grids, after which the color
channels are normalized by weight and the weight becomes a soft
occupancy.  Normalization is idempotent at the fusion level: fusing a
set of views once or fusing their raw sums gives the same grid, and
adding an empty view changes nothing.

A small 3-d convolutional encoder turns the fused 4-channel grid into
the 8-channel scene grid all downstream components consume.  The
encoder trains end to end through the renderer; nothing here is
supervised directly.

Grid layout is [C, W, H, D] with the continuous voxel coordinate
(p - origin) / voxel - 0.5, putting cell centers on integers.
"""

from __future__ import annotations

import numpy as np

from voxsim import tensor as T
from voxsim.errors import ConfigError, ShapeError
from voxsim.geometry import unproject

FUSE_EPS = 1e-6

GRID_CHANNELS = 8
RAW_CHANNELS = 4  # weighted r, g, b sums and the weight itself


class GridSpec:
    """Geometry of the scene grid: placement, resolution, conversions."""

    __slots__ = ("dims", "voxel", "origin")

    def __init__(self, dims=(32, 32, 32), voxel=0.01875,
                 origin=(-0.3, -0.3, -0.075)):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ConfigError("grid dims must be three positive integers")
        if voxel <= 0:
            raise ConfigError("voxel size must be positive")
        self.voxel = float(voxel)
        self.origin = np.asarray(origin, dtype=np.float64)
        if self.origin.shape != (3,):
            raise ConfigError("grid origin must be a 3-vector")

    def world_to_voxel(self, points):
        """Continuous voxel coords; cell centers at integer values."""
        points = np.asarray(points, dtype=np.float64)
        return (points - self.origin) / self.voxel - 0.5

    def voxel_to_world(self, coords):
        coords = np.asarray(coords, dtype=np.float64)
        return (coords + 0.5) * self.voxel + self.origin

    def cell_centers(self):
        """World positions of all cells, shape [W, H, D, 3]."""
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims],
                                   indexing="ij"), axis=-1)
        return self.voxel_to_world(idx)

    def center(self):
        """World center of the grid volume."""
        return self.origin + self.voxel * np.asarray(self.dims) / 2.0

    def __eq__(self, other):
        return (isinstance(other, GridSpec) and self.dims == other.dims
                and self.voxel == other.voxel
                and np.array_equal(self.origin, other.origin))

    def __repr__(self):
        return f"GridSpec(dims={self.dims}, voxel={self.voxel}, origin={self.origin.tolist()})"


def lift_view(depth, rgb, intr, pose, spec, dtype=np.float32):
    """One posed RGB-D image -> raw accumulation grid [4, W, H, D].

    Channels are (sum w*r, sum w*g, sum w*b, sum w) with unit weight per
    valid pixel.  Pixels with zero depth (sky) contribute nothing, as do
    points falling outside the grid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape != depth.shape + (3,):
        raise ShapeError("rgb must be depth shape plus a color axis")
    if rgb.max() > 1.00001:
        raise ShapeError("rgb must be normalized to [0, 1]")
    points = unproject(depth, intr, pose)
    valid = depth > 0
    pts = points[valid]
    colors = rgb[valid]
    coords = spec.world_to_voxel(pts)
    values = np.concatenate([colors, np.ones((colors.shape[0], 1))], axis=1)
    from voxsim import kernels
    raw = kernels.splat3d(np.ascontiguousarray(values),
                          np.ascontiguousarray(coords), spec.dims)
    return raw.astype(dtype)


def fuse_views(raw_grids):
    """Sum raw view grids and normalize -> fused grid [4, W, H, D].

    Output channels: mean color (weight-normalized) and soft occupancy
    w / (w + eps).
    """
    if len(raw_grids) == 0:
        raise ShapeError("need at least one raw grid to fuse")
    total = raw_grids[0].astype(np.float64, copy=True)
    for g in raw_grids[1:]:
        if g.shape != total.shape:
            raise ShapeError("raw grids must share a shape")
        total += g
    w = total[3:4]
    color = total[0:3] / (w + FUSE_EPS)
    occ = w / (w + FUSE_EPS)
    return np.concatenate([color, occ], axis=0).astype(raw_grids[0].dtype)


class LiftEncoder:
    """3-d conv encoder from the fused grid to the 8-channel scene grid."""

    WIDTHS = (RAW_CHANNELS, 8, 8, GRID_CHANNELS)

    def __init__(self, params, prefix="lift", rng=None):
        self.prefix = prefix
        self.params = params
        for i in range(3):
            name = f"{prefix}.conv{i}.k"
            if name not in params:
                if rng is None:
                    raise ConfigError(f"missing parameter {name} and no rng to init")
                params.xavier(name, (self.WIDTHS[i + 1], self.WIDTHS[i], 3, 3, 3), rng)

    def param_names(self):
        return [f"{self.prefix}.conv{i}.k" for i in range(3)]

    def __call__(self, fused):
        """fused [4, W, H, D] or [B, 4, W, H, D] -> scene grid, 8 channels."""
        x = fused if isinstance(fused, T.Tensor) else T.Tensor(fused)
        x = T.conv3d(x, self.params[f"{self.prefix}.conv0.k"], 1, 1)
        x = T.leaky_relu(x)
        x = T.conv3d(x, self.params[f"{self.prefix}.conv1.k"], 1, 1)
        x = T.leaky_relu(x)
        return T.conv3d(x, self.params[f"{self.prefix}.conv2.k"], 1, 1)


def lift_and_encode(episode_frame_views, intr, spec, encoder):
    """Convenience: (depth, rgb, pose) triples -> encoded scene grid."""
    raws = [lift_view(d, c, intr, p, spec) for d, c, p in episode_frame_views]
    fused = fuse_views(raws)
    return encoder(fused)
