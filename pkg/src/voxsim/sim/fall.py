"""Ballistic falling onto the table.

Bodies drop under gravity with semi-implicit Euler integration, the
velocity update before the position update.  While airborne the total
mechanical energy per unit mass decreases by exactly g^2 dt^2 / 2 per
step, a property the tests pin down.  Ground contact applies a
restitution bounce to the vertical velocity and a Coulomb friction
impulse to the horizontal velocity; slow impacts settle the body onto
the table exactly.  Bodies do not rotate in this mode and pass through
one another (they are spawned apart).
"""

from __future__ import annotations

import numpy as np

from voxsim.errors import ConfigError

GRAVITY = 9.81
REST_SPEED = 0.05  # impacts slower than this stick to the table


def _rest_threshold(dt):
    """Minimum impact speed that still bounces.

    A discrete bounce whose exit speed cannot outrun one step of
    gravity enters a one-step limit cycle at the fixed point
    e g dt / (1 + e) and never settles; scaling the rest threshold
    with g dt removes the cycle.
    """
    return max(REST_SPEED, 2.0 * GRAVITY * dt)


class FallSim:
    """Gravity integrator over a list of bodies, mutated in place."""

    def __init__(self, bodies, dt=0.04, restitution=0.3, friction=0.4):
        if dt <= 0:
            raise ConfigError("dt must be positive")
        if not 0.0 <= restitution < 1.0:
            raise ConfigError("restitution must be in [0, 1)")
        self.bodies = list(bodies)
        self.dt = float(dt)
        self.restitution = float(restitution)
        self.friction = float(friction)

    def step(self):
        dt = self.dt
        for body in self.bodies:
            rest_z = body.rest_z()
            on_ground = body.pos[2] <= rest_z + 1e-12 and abs(body.vel[2]) < 1e-12
            if not on_ground:
                body.vel = body.vel + np.array([0.0, 0.0, -GRAVITY * dt])
            body.pos = body.pos + body.vel * dt
            if body.pos[2] < rest_z:
                impact = -body.vel[2]
                body.pos[2] = rest_z
                if impact > _rest_threshold(dt):
                    body.vel[2] = self.restitution * impact
                else:
                    body.vel[2] = 0.0
                # Coulomb friction impulse bounded by the normal impulse
                speed = np.linalg.norm(body.vel[:2])
                if speed > 0.0:
                    drop = min(self.friction * (1.0 + self.restitution) * impact, speed)
                    body.vel[:2] *= (speed - drop) / speed
            if body.pos[2] <= rest_z + 1e-12 and body.vel[2] == 0.0:
                body.pos[2] = rest_z
                # kinetic friction decelerates sliding until it stops
                speed = np.linalg.norm(body.vel[:2])
                if speed > 0.0:
                    drop = min(self.friction * GRAVITY * dt, speed)
                    body.vel[:2] *= (speed - drop) / speed
        return self

    def poses(self):
        """Stacked body poses [N, 7]: position then wxyz quaternion."""
        return np.stack([np.concatenate([b.pos, b.quat]) for b in self.bodies])
