"""Rigid-body and camera geometry.

World frame: z up, right handed, table surface at z = 0.  Camera frame:
+z forward, +x right, +y down; the rotation matrix of a pose has those
axes as columns, world coordinates.  Quaternions are wxyz, Hamilton
convention, and rotations apply as p' = R(q) p.

Rays are built with an unnormalized direction whose forward component is
one, so the ray parameter equals camera-frame depth.  Pixel centers sit
at integer coordinates; a 64 pixel axis has its principal point at 31.5.
"""

from __future__ import annotations

import numpy as np

from voxsim.errors import ShapeError

# ---------------------------------------------------------------------------
# quaternions (plain numpy, wxyz)


def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ShapeError("rotation axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_yaw(angle):
    """Rotation about world z."""
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    c = np.cos(half)
    s = np.sin(half)
    z = np.zeros_like(c)
    return np.stack([c, z, z, s], axis=-1)


def quat_mul_np(a, b):
    """Hamilton product on [..., 4] arrays, b applied first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q, eps=1e-12):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < eps):
        raise ShapeError("cannot normalize a near-zero quaternion")
    return q / n


def quat_canonical_np(q):
    """Unit length with nonnegative w, the stored form for poses."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_to_matrix(q):
    """Rotation matrix [..., 3, 3] of a unit quaternion [..., 4]."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], axis=-1)
    row1 = np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], axis=-1)
    row2 = np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q, v):
    """Rotate vectors [..., 3] by quaternions [..., 4]."""
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=np.float64))


def quat_angle_between(a, b):
    """Geodesic angle in radians between two unit quaternions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = np.clip(np.abs(np.sum(a * b, axis=-1)), 0.0, 1.0)
    return 2.0 * np.arccos(dot)


def yaw_of_quat(q):
    """Extract the z rotation angle of a yaw-only quaternion."""
    q = np.asarray(q, dtype=np.float64)
    return 2.0 * np.arctan2(q[..., 3], q[..., 0])


# ---------------------------------------------------------------------------
# cameras


class CameraIntrinsics:
    """Pinhole intrinsics with pixel centers at integer coordinates."""

    __slots__ = ("fx", "fy", "cx", "cy", "width", "height")

    def __init__(self, fx, fy, cx, cy, width, height):
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)

    @classmethod
    def centered(cls, width=64, height=64, focal=70.0):
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def __repr__(self):
        return (f"CameraIntrinsics(fx={self.fx}, fy={self.fy}, cx={self.cx}, "
                f"cy={self.cy}, {self.width}x{self.height})")


class CameraPose:
    """Camera origin and orientation, rot columns [right, down, forward]."""

    __slots__ = ("origin", "rot")

    def __init__(self, origin, rot):
        origin = np.asarray(origin, dtype=np.float64)
        rot = np.asarray(rot, dtype=np.float64)
        if origin.shape != (3,) or rot.shape != (3, 3):
            raise ShapeError("camera pose wants origin (3,) and rot (3,3)")
        self.origin = origin
        self.rot = rot

    def world_to_cam(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.origin) @ self.rot

    def cam_to_world(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rot.T + self.origin


def look_at(origin, target, up=(0.0, 0.0, 1.0)):
    """Pose whose forward axis points from origin to target."""
    origin = np.asarray(origin, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - origin
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ShapeError("look_at target coincides with the origin")
    forward = forward / fn
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ShapeError("look_at forward is parallel to up")
    right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return CameraPose(origin, rot)


def pixel_rays(intr, pose):
    """World-frame ray directions [H, W, 3] with unit forward component."""
    vv, uu = np.meshgrid(np.arange(intr.height, dtype=np.float64),
                         np.arange(intr.width, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(uu - intr.cx) / intr.fx,
                         (vv - intr.cy) / intr.fy,
                         np.ones_like(uu)], axis=-1)
    return dirs_cam @ pose.rot.T


def project(points, intr, pose):
    """World points [N, 3] -> pixel coords [N, 2] (u, v) and depth [N].

    Depth is camera-frame z; points at or behind the camera plane get a
    nonpositive depth and their pixel coordinates are not meaningful.
    """
    cam = pose.world_to_cam(np.asarray(points, dtype=np.float64))
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[..., 0] / z + intr.cx
        v = intr.fy * cam[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def unproject(depth, intr, pose):
    """Depth image [H, W] -> world points [H, W, 3].

    Zero depth marks a miss; those pixels unproject onto the camera
    origin and must be masked by the caller via depth > 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ShapeError(f"depth image shape {depth.shape} does not match "
                         f"intrinsics {intr.height}x{intr.width}")
    dirs = pixel_rays(intr, pose)
    return pose.origin + depth[..., None] * dirs


def ring_camera(azimuth, elevation, distance, target=(0.0, 0.0, 0.1)):
    """Camera on a sphere around the target, looking at it.

    Azimuth is measured in the world xy plane from +x, elevation above
    the horizon.
    """
    target = np.asarray(target, dtype=np.float64)
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    offset = distance * np.array([ce * ca, ce * sa, se])
    return look_at(target + offset, target)
