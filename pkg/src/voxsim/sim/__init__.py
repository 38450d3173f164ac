"""Ground-truth rigid-body simulator.

Provides the analytic world the learned components are trained against:
body definitions, quasi-static pushing, ballistic falling, ray-cast
RGB-D rendering, and the episode container with its binary storage
format.
"""

from voxsim.sim.bodies import (
    BOX, CYLINDER, Body, characteristic_length, contains_points,
    closest_surface_point, spawn_bodies,
)
from voxsim.sim.push import PushSim, limit_surface_twist
from voxsim.sim.fall import FallSim, GRAVITY
from voxsim.sim.render import (
    AMBIENT, LIGHT_DIR, PUSHER_COLOR, PUSHER_HALF_HEIGHT, PUSHER_RADIUS,
    TABLE_HALF, render_scene,
)
from voxsim.sim.episodes import (
    Episode, load_episodes, read_manifest, save_episodes, write_manifest,
)
from voxsim.sim.generate import (
    SIZE_RANGES_TEST, SIZE_RANGES_TRAIN, default_cameras, generate_dataset,
    generate_episode, sample_size,
)

__all__ = [
    "BOX", "CYLINDER", "Body", "characteristic_length", "contains_points",
    "closest_surface_point", "spawn_bodies",
    "PushSim", "limit_surface_twist",
    "FallSim", "GRAVITY",
    "AMBIENT", "LIGHT_DIR", "PUSHER_COLOR", "PUSHER_HALF_HEIGHT",
    "PUSHER_RADIUS", "TABLE_HALF", "render_scene",
    "Episode", "load_episodes", "read_manifest", "save_episodes",
    "write_manifest",
    "SIZE_RANGES_TEST", "SIZE_RANGES_TRAIN", "default_cameras",
    "generate_dataset", "generate_episode", "sample_size",
]
