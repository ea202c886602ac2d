"""Ground-truth vehicle propagation.

The truth plant runs the same blended bicycle model family as the
controller but with its own parameter set, so closed-loop tests always see
model mismatch. Integration happens on a fine physics grid (default 1 ms)
nested inside each control tick; actuators slew toward their commanded
set-points under rate limits instead of jumping, and commands can be
delayed by a configurable number of ticks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .._jit import maybe_njit
from ..core import Pose2, Twist2
from ..vehicle import N_STATE, VehicleParams, _f, _rk4_step


def default_truth_params() -> VehicleParams:
    """Plant parameters: a few percent off the controller's notion."""
    return VehicleParams(
        mass=196.0,
        lf=0.75,
        lr=0.78,
        cornering_stiffness=5200.0,
        a_max=9.6,
        yaw_inertia=118.0,
        v_top=13.2,
    )


@dataclass
class WorldConfig:
    vehicle: VehicleParams = field(default_factory=default_truth_params)
    tick_dt: float = 0.05
    physics_dt: float = 0.001
    command_latency_ticks: int = 0

    def __post_init__(self) -> None:
        n = self.tick_dt / self.physics_dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("tick_dt must be an integer multiple of physics_dt")
        if self.command_latency_ticks < 0:
            raise ValueError("command latency cannot be negative")


@maybe_njit
def _tick_kernel(
    s: np.ndarray,
    delta_target: float,
    throttle_target: float,
    steer_rate_max: float,
    throttle_rate_max: float,
    par: np.ndarray,
    dt: float,
    n_sub: int,
) -> np.ndarray:
    """Integrate one control period with per-substep actuator slew."""
    out = s.copy()
    for _ in range(n_sub):
        phi = (delta_target - out[7]) / dt
        if phi > steer_rate_max:
            phi = steer_rate_max
        elif phi < -steer_rate_max:
            phi = -steer_rate_max
        dD = (throttle_target - out[8]) / dt
        if dD > throttle_rate_max:
            dD = throttle_rate_max
        elif dD < -throttle_rate_max:
            dD = -throttle_rate_max
        u = np.empty(3)
        u[0] = phi
        u[1] = dD
        u[2] = 0.0
        out = _rk4_step(out, u, dt, par)
    return out


class World:
    """Truth state under delayed, rate-limited actuator commands."""

    def __init__(self, start: Pose2, cfg: WorldConfig | None = None):
        self.cfg = cfg or WorldConfig()
        self._par = self.cfg.vehicle.as_array()
        self.state = np.zeros(N_STATE)
        self.state[0] = start.x
        self.state[1] = start.y
        self.state[4] = start.psi
        self._n_sub = int(round(self.cfg.tick_dt / self.cfg.physics_dt))
        # commands issued now take effect command_latency_ticks later
        self._queue: deque[tuple[float, float]] = deque(
            [(0.0, 0.0)] * self.cfg.command_latency_ticks
        )
        self.t = 0.0
        self.ticks = 0

    # -- per-tick interface --------------------------------------------------

    def step(self, steering_target: float, throttle_target: float) -> None:
        """Advance one control period under the (possibly delayed) command."""
        self._queue.append((float(steering_target), float(throttle_target)))
        delta_t, D_t = self._queue.popleft()
        veh = self.cfg.vehicle
        self.state = _tick_kernel(
            self.state,
            delta_t,
            D_t,
            veh.steer_rate_max,
            veh.throttle_rate_max,
            self._par,
            self.cfg.physics_dt,
            self._n_sub,
        )
        if not np.all(np.isfinite(self.state)):
            raise FloatingPointError("truth state diverged")
        self.ticks += 1
        self.t = self.ticks * self.cfg.tick_dt

    # -- sensor-facing views ---------------------------------------------------

    @property
    def pose(self) -> Pose2:
        return Pose2(self.state[0], self.state[1], self.state[4])

    @property
    def twist(self) -> Twist2:
        return Twist2(self.state[2], self.state[3], self.state[5])

    def body_accel(self) -> tuple[float, float]:
        """Vehicle-frame acceleration states an IMU would report.

        The estimator models v as driven by (ax, ay) plus rotation
        coupling, so the plant exposes exactly that decomposition:
        ax = dvx/dt - r*vy, ay = dvy/dt + r*vx.
        """
        ds = _f(self.state, np.zeros(3), self._par)
        r, vx, vy = self.state[5], self.state[2], self.state[3]
        return float(ds[2] - r * vy), float(ds[3] + r * vx)

    @property
    def steering(self) -> float:
        return float(self.state[7])

    @property
    def throttle(self) -> float:
        return float(self.state[8])
