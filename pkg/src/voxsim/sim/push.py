"""Quasi-static planar pushing.

A kinematic cylindrical rod pushes bodies across the table.  Inertia is
negligible at tabletop speeds: the instant the rod stops penetrating, a
body stops moving, so a step's outcome is a settled pose, not a
velocity.

The motion law is an ellipsoidal limit surface for a frictionless point
contact.  The rod can only transmit force along the contact normal n
(into the body).  For a drive displacement d applied at a contact with
lever arm r about the centroid:

    tau = r x n                    (scalar, z component)
    s   = (d . n) / (1 + tau^2 / rho^2)
    dx  = s n                      (centroid translation)
    dth = s tau / rho^2            (yaw change)

rho is the body's characteristic footprint length.  A centered push
(tau = 0) translates without turning; pushes near an edge trade
translation for rotation.  Penetration drives the resolution: each
substep the rod advances a fraction of the commanded action and any
overlap is pushed out through the law above.  Moving bodies can shove
their neighbors through the same law, chained up to a fixed depth.
"""

from __future__ import annotations

import numpy as np

from voxsim.errors import ConfigError
from voxsim.sim.bodies import body_overlap, closest_surface_point

SUBSTEPS = 40
CHAIN_CAP = 8
RESOLVE_ITERS = 4


def limit_surface_twist(drive_xy, contact_xy, center_xy, rho):
    """One application of the pushing law.

    drive_xy is the displacement to transmit at the contact point.
    Returns (translation_xy, yaw_change).
    """
    drive = np.asarray(drive_xy, dtype=np.float64)
    mag = np.linalg.norm(drive)
    if mag < 1e-15:
        return np.zeros(2), 0.0
    n = drive / mag
    r = np.asarray(contact_xy, dtype=np.float64) - np.asarray(center_xy, dtype=np.float64)
    tau = r[0] * n[1] - r[1] * n[0]
    c2 = rho * rho
    s = mag / (1.0 + tau * tau / c2)
    return s * n, s * tau / c2


class PushSim:
    """Rod-pushing simulator over a list of bodies.

    Bodies are mutated in place.  step() advances the rod by one action
    displacement and returns the settled world.
    """

    def __init__(self, bodies, pusher_xy, pusher_radius=0.012,
                 substeps=SUBSTEPS, chain_cap=CHAIN_CAP):
        if substeps < 1:
            raise ConfigError("substeps must be at least 1")
        self.bodies = list(bodies)
        self.pusher = np.asarray(pusher_xy, dtype=np.float64)[:2].copy()
        self.pusher_radius = float(pusher_radius)
        self.substeps = int(substeps)
        self.chain_cap = int(chain_cap)

    def step(self, action_xy):
        """Advance the rod by action_xy (meters), settling all contacts."""
        action = np.asarray(action_xy, dtype=np.float64)[:2]
        inc = action / self.substeps
        for _ in range(self.substeps):
            self.pusher = self.pusher + inc
            self._resolve_pusher()
        return self

    def _resolve_pusher(self):
        for _ in range(RESOLVE_ITERS):
            worst = None
            for body in self.bodies:
                dist, contact, outward = closest_surface_point(body, self.pusher)
                depth = self.pusher_radius - dist
                if depth > 1e-12 and (worst is None or depth > worst[0]):
                    worst = (depth, body, contact, outward)
            if worst is None:
                return
            depth, body, contact, outward = worst
            drive = -outward * depth  # into the body
            self._move_body(body, drive, contact, self.chain_cap)

    def _move_body(self, body, drive_xy, contact_xy, chain_budget):
        dxy, dyaw = limit_surface_twist(drive_xy, contact_xy, body.pos[:2], body.rho)
        body.pos = body.pos + np.array([dxy[0], dxy[1], 0.0])
        body.yaw = body.yaw + dyaw
        if chain_budget <= 0:
            return
        for other in self.bodies:
            if other is body:
                continue
            hit = body_overlap(body, other)
            if hit is None:
                continue
            depth, contact, n_ab = hit
            if depth <= 1e-12:
                continue
            self._move_body(other, n_ab * depth, contact, chain_budget - 1)

    def max_penetration(self):
        """Deepest rod overlap with any body, for post-step checks."""
        worst = 0.0
        for body in self.bodies:
            dist, _, _ = closest_surface_point(body, self.pusher)
            worst = max(worst, self.pusher_radius - dist)
        return worst

    def poses(self):
        """Stacked body poses [N, 7]: position then wxyz quaternion."""
        return np.stack([np.concatenate([b.pos, b.quat]) for b in self.bodies])
