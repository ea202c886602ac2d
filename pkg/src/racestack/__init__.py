"""Desk-scale autonomous racing stack.

Submodules
----------
core
    Frames, angles, cone taxonomy, seeded randomness.
estimation
    Error-gated extended Kalman filter for the vehicle state.
perception
    Ground-plane fitting, depth clustering, and cone triangulation.
slam
    Particle-filter landmark SLAM with per-mission priors.
centerline
    Gate extraction and incremental beam search over cone maps.
spline / vehicle / mpc
    Arclength path representation, blended bicycle dynamics, and the
    receding-horizon controller.
ebs
    Pneumatic brake-circuit simulation and check-up coverage analysis.
sim
    Deterministic closed-loop mission harness and CLI entry points.
"""

from racestack.core import (
    ConeColor,
    Pose2,
    RngStream,
    Twist2,
    angle_diff,
    vehicle_to_world,
    world_to_vehicle,
    wrap_angle,
)

__version__ = "0.1.0"

__all__ = [
    "ConeColor",
    "Pose2",
    "RngStream",
    "Twist2",
    "angle_diff",
    "vehicle_to_world",
    "world_to_vehicle",
    "wrap_angle",
    "__version__",
]
