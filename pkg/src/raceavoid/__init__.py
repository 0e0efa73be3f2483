"""Racing-parameterised collision avoidance: simulator, PPO trainer, MPC-APF baseline, benchmarks."""
from .dynamics import VehicleParams, VehicleState, step_dynamics, wrap_angle
from .world import Footprint, SceneGeometry, cast_rays, detect_collision, load_scene, off_track, shape_scan

__version__ = "0.1.0"

__all__ = [
    "VehicleParams", "VehicleState", "step_dynamics", "wrap_angle",
    "Footprint", "SceneGeometry", "cast_rays", "detect_collision", "load_scene", "off_track", "shape_scan",
]
