"""Rigid bodies: cubes and cylinders resting on the table plane.

A body's size is one scalar: the cube edge length, or the cylinder
diameter (the cylinder is as tall as it is wide).  Bodies rotate about
z only while being pushed, so orientation is stored as a yaw angle and
exposed as a wxyz quaternion.
"""

from __future__ import annotations

import numpy as np

from voxsim import geometry as geo
from voxsim.errors import ConfigError, DataError

BOX = "box"
CYLINDER = "cylinder"
KIND_CODES = {BOX: 0, CYLINDER: 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def characteristic_length(kind, size):
    """Pressure-weighted mean lever arm of the support footprint.

    Sets the translation-to-rotation coupling of the pushing law.  The
    cylinder value is the closed form for a uniform disk, 2R/3; the cube
    footprint is averaged over a fixed 16x16 grid of cell centers so the
    value is deterministic and implementation independent.
    """
    if kind == CYLINDER:
        return size / 3.0  # 2R/3 with R = size/2
    if kind == BOX:
        h = size / 2.0
        centers = (np.arange(16) + 0.5) / 16.0 * size - h
        xx, yy = np.meshgrid(centers, centers, indexing="ij")
        return float(np.sqrt(xx * xx + yy * yy).mean())
    raise ConfigError(f"unknown body kind: {kind!r}")


class Body:
    """One rigid body.  Position is the volume centroid."""

    __slots__ = ("kind", "size", "color", "pos", "yaw", "vel")

    def __init__(self, kind, size, color, pos, yaw=0.0, vel=None):
        if kind not in KIND_CODES:
            raise ConfigError(f"unknown body kind: {kind!r}")
        if size <= 0:
            raise ConfigError("body size must be positive")
        self.kind = kind
        self.size = float(size)
        self.color = np.asarray(color, dtype=np.float64).copy()
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.yaw = float(yaw)
        self.vel = np.zeros(3) if vel is None else np.asarray(vel, dtype=np.float64).copy()

    @property
    def half(self):
        """Half extents in the body frame: box (hx,hy,hz), cylinder (R,hh,0)."""
        h = self.size / 2.0
        if self.kind == BOX:
            return np.array([h, h, h])
        return np.array([h, h, 0.0])

    @property
    def half_height(self):
        return self.size / 2.0

    @property
    def quat(self):
        return geo.quat_yaw(self.yaw)

    @property
    def rho(self):
        return characteristic_length(self.kind, self.size)

    def footprint_radius(self):
        """Radius of the bounding circle of the xy footprint."""
        h = self.size / 2.0
        return h * np.sqrt(2.0) if self.kind == BOX else h

    def rest_z(self):
        """Centroid height when the body sits on the table."""
        return self.half_height

    def copy(self):
        return Body(self.kind, self.size, self.color, self.pos, self.yaw, self.vel)

    def __repr__(self):
        return (f"Body({self.kind}, size={self.size:.4f}, "
                f"pos={np.round(self.pos, 4).tolist()}, yaw={self.yaw:.4f})")


def closest_surface_point(body, point_xy):
    """Closest point on the body's footprint boundary to a 2-d point.

    Returns (signed_distance, boundary_point_xy, outward_normal_xy).
    The distance is negative when the point lies inside the footprint;
    the normal always points from the body toward the exterior.
    """
    p = np.asarray(point_xy, dtype=np.float64)
    c = body.pos[:2]
    if body.kind == CYLINDER:
        d = p - c
        n = np.linalg.norm(d)
        radius = body.size / 2.0
        if n < 1e-12:
            outward = np.array([1.0, 0.0])
            return -radius, c + radius * outward, outward
        outward = d / n
        return n - radius, c + radius * outward, outward
    # box: work in the body frame
    h = body.size / 2.0
    cy, sy = np.cos(body.yaw), np.sin(body.yaw)
    rel = p - c
    local = np.array([cy * rel[0] + sy * rel[1], -sy * rel[0] + cy * rel[1]])
    clamped = np.clip(local, -h, h)
    if np.all(np.abs(local) < h):
        # inside: exit along the axis with the least clearance
        clear = h - np.abs(local)
        ax = int(np.argmin(clear))
        sgn = 1.0 if local[ax] >= 0 else -1.0
        bnd = local.copy()
        bnd[ax] = sgn * h
        n_local = np.zeros(2)
        n_local[ax] = sgn
        dist = -clear[ax]
    else:
        bnd = clamped
        diff = local - clamped
        dist = float(np.linalg.norm(diff))
        if dist < 1e-12:
            # exactly on the boundary: normal from the touching face
            clear = h - np.abs(local)
            ax = int(np.argmin(clear))
            n_local = np.zeros(2)
            n_local[ax] = 1.0 if local[ax] >= 0 else -1.0
        else:
            n_local = diff / dist
    bnd_world = c + np.array([cy * bnd[0] - sy * bnd[1], sy * bnd[0] + cy * bnd[1]])
    n_world = np.array([cy * n_local[0] - sy * n_local[1], sy * n_local[0] + cy * n_local[1]])
    return float(dist), bnd_world, n_world


def body_overlap(a, b):
    """Deepest contact between two footprints.

    Returns (depth, contact_xy, normal_xy) with the normal pointing from
    a toward b, or None when the footprints are separated.  Box-box
    contacts are found by corner sampling, adequate for the small per
    substep displacements the simulator takes.
    """
    if a.kind == CYLINDER and b.kind == CYLINDER:
        d = b.pos[:2] - a.pos[:2]
        dist = np.linalg.norm(d)
        rsum = (a.size + b.size) / 2.0
        if dist >= rsum:
            return None
        n = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
        contact = a.pos[:2] + (a.size / 2.0) * n
        return rsum - dist, contact, n
    if a.kind == CYLINDER or b.kind == CYLINDER:
        disk, box = (a, b) if a.kind == CYLINDER else (b, a)
        dist, bnd, outward = closest_surface_point(box, disk.pos[:2])
        depth = disk.size / 2.0 - dist
        if depth <= 0:
            return None
        # outward points from the box toward the disk in both the
        # separated and center-inside cases
        if disk is a:
            return depth, bnd, -outward
        return depth, bnd, outward
    # box-box: push each corner of one against the other
    best = None
    for second, flip in ((b, False), (a, True)):
        first = a if not flip else b
        for corner in _box_corners(first):
            dist, bnd, outward = closest_surface_point(second, corner)
            depth = -dist
            if depth > 0 and (best is None or depth > best[0]):
                # `outward` points from `second` toward the intruding
                # corner's owner; orient the result from a toward b
                n_ab = -outward if not flip else outward
                best = (depth, bnd, n_ab)
    return best


def _box_corners(body):
    h = body.size / 2.0
    cy, sy = np.cos(body.yaw), np.sin(body.yaw)
    c = body.pos[:2]
    out = []
    for sx in (-1.0, 1.0):
        for sy_ in (-1.0, 1.0):
            lx, ly = sx * h, sy_ * h
            out.append(c + np.array([cy * lx - sy * ly, sy * lx + cy * ly]))
    return out


def contains_points(body, points):
    """Boolean mask of world points inside the body volume."""
    pts = np.asarray(points, dtype=np.float64)
    rel = pts - body.pos
    h = body.size / 2.0
    inside_z = np.abs(rel[..., 2]) <= h
    if body.kind == CYLINDER:
        r2 = rel[..., 0] ** 2 + rel[..., 1] ** 2
        return inside_z & (r2 <= h * h)
    cy, sy = np.cos(body.yaw), np.sin(body.yaw)
    lx = cy * rel[..., 0] + sy * rel[..., 1]
    ly = -sy * rel[..., 0] + cy * rel[..., 1]
    return inside_z & (np.abs(lx) <= h) & (np.abs(ly) <= h)


def spawn_bodies(rng, kinds, sizes, region=0.12, margin=0.01, max_tries=200):
    """Place bodies at rest, non-overlapping, inside a square region."""
    if len(kinds) != len(sizes):
        raise DataError("kinds and sizes must have equal length")
    bodies = []
    for kind, size in zip(kinds, sizes):
        color = rng.uniform(0.2, 0.9, size=3)
        yaw = rng.uniform(-np.pi, np.pi) if kind == BOX else 0.0
        for _ in range(max_tries):
            xy = rng.uniform(-region, region, size=2)
            body = Body(kind, size, color, [xy[0], xy[1], size / 2.0], yaw)
            ok = all(np.linalg.norm(xy - other.pos[:2])
                     > body.footprint_radius() + other.footprint_radius() + margin
                     for other in bodies)
            if ok:
                bodies.append(body)
                break
        else:
            raise DataError("could not place bodies without overlap")
    return bodies
