"""voxsim: object-factorized 3D voxel environment simulator.

Lifts posed RGB-D views into a world-frame voxel feature grid, detects
objects as 3D boxes, forecasts their motion with a graph interaction
network over first-frame appearance crops, re-renders synthesized scenes,
and plans pushing actions by sampling-based MPC against the learned model.
"""

__version__ = "0.1.0"

from voxsim.errors import (
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    VoxsimError,
)

__all__ = [
    "VoxsimError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "NumericError",
    "__version__",
]
