"""RGB-D rendering of simulator scenes via the ray-cast kernel."""

from __future__ import annotations

import numpy as np

from voxsim import kernels
from voxsim.sim.bodies import KIND_CODES

TABLE_HALF = 0.5
LIGHT_DIR = np.array([-0.35, 0.25, -0.9]) / np.linalg.norm([-0.35, 0.25, -0.9])
AMBIENT = 0.35

PUSHER_RADIUS = 0.012
PUSHER_HALF_HEIGHT = 0.05
PUSHER_COLOR = np.array([0.45, 0.45, 0.48])


def render_scene(bodies, intr, pose, pusher_xy=None, light_dir=None, ambient=AMBIENT):
    """Ray-cast a scene -> (depth [H,W] float64, rgb [H,W,3] float64).

    Depth is camera-frame z, zero where only sky is visible.  When a
    pusher position is given the rod is rendered as an extra cylinder;
    it is scene dressing, not a body.
    """
    light = LIGHT_DIR if light_dir is None else np.asarray(light_dir, dtype=np.float64)
    n = len(bodies) + (1 if pusher_xy is not None else 0)
    body_type = np.zeros(n, dtype=np.int64)
    body_half = np.zeros((n, 3))
    body_rot = np.zeros((n, 3, 3))
    body_pos = np.zeros((n, 3))
    body_color = np.zeros((n, 3))
    for i, b in enumerate(bodies):
        body_type[i] = KIND_CODES[b.kind]
        if b.kind == "box":
            body_half[i] = b.half
        else:
            body_half[i] = (b.size / 2.0, b.half_height, 0.0)
        cy, sy = np.cos(b.yaw), np.sin(b.yaw)
        rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        body_rot[i] = rot.T  # kernel wants world-to-body
        body_pos[i] = b.pos
        body_color[i] = b.color
    if pusher_xy is not None:
        i = n - 1
        body_type[i] = 1
        body_half[i] = (PUSHER_RADIUS, PUSHER_HALF_HEIGHT, 0.0)
        body_rot[i] = np.eye(3)
        body_pos[i] = (pusher_xy[0], pusher_xy[1], PUSHER_HALF_HEIGHT)
        body_color[i] = PUSHER_COLOR
    depth, rgb = kernels.raycast(
        np.ascontiguousarray(pose.origin), np.ascontiguousarray(pose.rot),
        intr.fx, intr.fy, intr.cx, intr.cy, intr.height, intr.width,
        body_type, np.ascontiguousarray(body_half),
        np.ascontiguousarray(body_rot), np.ascontiguousarray(body_pos),
        np.ascontiguousarray(body_color), TABLE_HALF,
        np.ascontiguousarray(light), ambient)
    return depth, rgb
