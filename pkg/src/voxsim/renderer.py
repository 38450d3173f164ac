"""Neural rendering of scene grids to RGB images.

The scene grid is resampled into a camera-oriented box: for each output
pixel and each depth bin, a query point is laid out along the camera's
right/down/forward axes around the grid center, sampled trilinearly,
and averaged over depth.  This orientation-only orthographic projection
keeps the operation linear in the grid and exactly invertible on the
lattice: with the default square geometry an axis-aligned camera reads
back the grid's own depth-axis mean.

A small 2-d convolutional head decodes the projected feature image to
RGB through a sigmoid.  Training the head against held-out rendered
views is what shapes the lift encoder's features; the renderer is the
only supervised path into the scene representation.
"""

from __future__ import annotations

import numpy as np

from voxsim import tensor as T
from voxsim.errors import ConfigError, ShapeError
from voxsim.lift import GRID_CHANNELS

RENDER_SIZE = 32  # output height, width and depth bin count


def projection_coords(pose_rot, spec, size=RENDER_SIZE):
    """Voxel-space query coords [size^3, 3] for one camera orientation.

    Row-major over (v, u, depth bin); depth varies fastest.  Queries
    tile a cube of side size voxels centered on the grid center,
    aligned with the camera axes.  Built directly in voxel units so an
    axis-aligned orientation queries the lattice exactly.
    """
    rot = np.asarray(pose_rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ShapeError("pose rotation must be 3x3")
    half = (size - 1) / 2.0
    line = np.arange(size) - half  # voxel units
    vv, uu, dd = np.meshgrid(line, line, line, indexing="ij")
    right, down, forward = rot[:, 0], rot[:, 1], rot[:, 2]
    center = (np.asarray(spec.dims, dtype=np.float64) - 1.0) / 2.0
    pts = (uu[..., None] * right + vv[..., None] * down
           + dd[..., None] * forward + center)
    return pts.reshape(-1, 3)


def orient_and_project(grid, pose_rot, spec, size=RENDER_SIZE):
    """Scene grid [C,W,H,D] -> camera-aligned feature image [C,size,size].

    Differentiable in the grid; the camera orientation is a constant of
    the operation.
    """
    coords = projection_coords(pose_rot, spec, size)
    samples = T.grid_sample3d(grid, coords)          # [size^3, C]
    c = samples.shape[1]
    cube = T.reshape(samples, (size, size, size, c))  # [v, u, d, C]
    planes = T.transpose(cube, (3, 0, 1, 2))          # [C, v, u, d]
    summed = T.sum_(planes, axis=3)
    return T.mul(summed, 1.0 / size)


class RenderHead:
    """2-d conv decoder from projected features to RGB in [0, 1]."""

    WIDTHS = (GRID_CHANNELS, 16, 16, 3)

    def __init__(self, params, prefix="render", rng=None):
        self.prefix = prefix
        self.params = params
        for i in range(3):
            name = f"{prefix}.conv{i}.k"
            if name not in params:
                if rng is None:
                    raise ConfigError(f"missing parameter {name} and no rng to init")
                params.xavier(name, (self.WIDTHS[i + 1], self.WIDTHS[i], 3, 3), rng)

    def param_names(self):
        return [f"{self.prefix}.conv{i}.k" for i in range(3)]

    def __call__(self, feats):
        """feats [C,H,W] or [B,C,H,W] -> rgb [3,H,W] or [B,3,H,W]."""
        x = feats if isinstance(feats, T.Tensor) else T.Tensor(feats)
        x = T.conv2d(x, self.params[f"{self.prefix}.conv0.k"], 1, 1)
        x = T.leaky_relu(x)
        x = T.conv2d(x, self.params[f"{self.prefix}.conv1.k"], 1, 1)
        x = T.leaky_relu(x)
        x = T.conv2d(x, self.params[f"{self.prefix}.conv2.k"], 1, 1)
        return T.sigmoid(x)


def render_view(grid, pose_rot, spec, head, size=RENDER_SIZE):
    """Scene grid -> RGB image tensor [3, size, size] for one camera."""
    feats = orient_and_project(grid, pose_rot, spec, size)
    return head(feats)


def downsample_rgb(rgb_u8, factor):
    """Box-average a [H,W,3] uint8 image -> [3,h,w] float in [0,1]."""
    rgb = np.asarray(rgb_u8, dtype=np.float64) / 255.0
    h, w = rgb.shape[:2]
    if h % factor or w % factor:
        raise ShapeError("image size must be divisible by the factor")
    small = rgb.reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))
    return np.ascontiguousarray(small.transpose(2, 0, 1))


def view_loss(grid, pose_rot, target_rgb, spec, head, size=RENDER_SIZE):
    """MSE between a rendered view and a target [3,size,size] image."""
    pred = render_view(grid, pose_rot, spec, head, size)
    return T.mse(pred, target_rgb)
