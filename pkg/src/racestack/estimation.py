"""Extended Kalman filter for the vehicle state.

The filter tracks an 8-state vector

    x = (X, Y, psi, v_x, v_y, r, a_x, a_y)

with position and heading in the world frame and velocities/accelerations
in the vehicle frame. The rigid-body process model treats the acceleration
states as random walks and rotates the body velocity into the world frame:

    dX/dt   = cos(psi) v_x - sin(psi) v_y
    dY/dt   = sin(psi) v_x + cos(psi) v_y
    dpsi/dt = r
    dv_x/dt = a_x + r v_y
    dv_y/dt = a_y - r v_x
    dr/dt = da_x/dt = da_y/dt = 0

The mean is propagated with a classic RK4 step; the covariance uses the
Jacobian of that exact discrete map (chain rule through the RK4 stages),
so the analytic transition matrix matches finite differences of the
propagation to high order.

Measurement updates are gated with a Mahalanobis test against the 99.9%
chi-square quantile of the innovation dimension, and the covariance update
uses the Joseph form to stay symmetric positive definite.

When sensors drop out the filter degrades gracefully: without GNSS it runs
on IMU + ground-speed updates; without the ground-speed sensor it runs on
GNSS + IMU; with both gone it falls back to IMU only and switches to a
kinematic-bicycle process model that suppresses lateral drift. Losing the
IMU on top of that is terminal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import chi2

from racestack.core import wrap_angle

STATE_DIM = 8
IX, IY, IPSI, IVX, IVY, IR, IAX, IAY = range(STATE_DIM)

GATE_CONFIDENCE = 0.999
# chi-square gate thresholds by innovation dimension, precomputed once
_GATE = {dof: float(chi2.ppf(GATE_CONFIDENCE, dof)) for dof in (1, 2, 3)}


class EstimationError(Exception):
    """Base class for estimator failures."""


class MeasurementRejected(EstimationError):
    """Innovation failed the chi-square gate; the state was not changed."""


class SingularInnovation(EstimationError):
    """Innovation covariance could not be inverted."""


class NonFiniteState(EstimationError):
    """State or covariance left the realm of finite numbers."""


class TerminalSensorFault(EstimationError):
    """No usable velocity or pose sensing remains."""


class ProcessModel(Enum):
    RIGID_BODY = "rigid_body"
    KINEMATIC_BICYCLE = "kinematic_bicycle"


@dataclass(slots=True)
class SensorStatus:
    """Health flags for the sensor groups the fallback ladder cares about."""

    gnss_ok: bool = True
    gss_ok: bool = True
    imu_ok: bool = True


# --- measurement records -------------------------------------------------
# Each carries its own noise covariance so per-sample quality (e.g. RTK fix
# level) can flow through without reconfiguring the filter.


@dataclass(slots=True)
class GnssPose:
    x: float
    y: float
    psi: float
    cov: np.ndarray  # 3x3


@dataclass(slots=True)
class GnssVel:
    vx: float
    vy: float
    cov: np.ndarray  # 2x2, vehicle frame


@dataclass(slots=True)
class ImuAccel:
    ax: float
    ay: float
    cov: np.ndarray  # 2x2


@dataclass(slots=True)
class ImuYawRate:
    r: float
    var: float


@dataclass(slots=True)
class GssVel:
    """Ground-speed-sensor velocity, measured at the sensor mount point."""

    vx: float
    vy: float
    cov: np.ndarray  # 2x2


@dataclass(slots=True)
class EkfConfig:
    """Process noise, mount geometry, and fallback tuning."""

    # power spectral densities (per-second variance growth), one per state
    process_psd: np.ndarray = field(
        default_factory=lambda: np.array(
            [1e-4, 1e-4, 1e-4, 1e-3, 1e-3, 0.25, 4.0, 4.0]
        )
    )
    # ground-speed sensor lever arm in the vehicle frame [m]
    gss_offset: tuple[float, float] = (-1.5, 0.0)
    # bicycle fallback: time constant pulling v_y to its no-slip value [s]
    vy_relax_tau: float = 0.5
    # bicycle fallback: pseudo-measurement noise on v_y ~ 0 [m/s]
    vy_pseudo_sigma: float = 0.1
    rear_axle_offset: float = 0.765  # l_r [m]


def gss_predicted_velocity(
    vx: float, vy: float, r: float, offset: tuple[float, float]
) -> np.ndarray:
    """Velocity seen by a sensor mounted at ``offset`` on a rigid body.

    Planar kinematics: v_sensor = v_body + r x p, which in 2D is
    (vx - r p_y, vy + r p_x).
    """
    px, py = offset
    return np.array([vx - r * py, vy + r * px])


def _dynamics(x: np.ndarray, model: ProcessModel, cfg: EkfConfig) -> np.ndarray:
    c, s = math.cos(x[IPSI]), math.sin(x[IPSI])
    vx, vy, r = x[IVX], x[IVY], x[IR]
    dx = np.zeros(STATE_DIM)
    dx[IX] = c * vx - s * vy
    dx[IY] = s * vx + c * vy
    dx[IPSI] = r
    dx[IVX] = x[IAX] + r * vy
    dx[IVY] = x[IAY] - r * vx
    if model is ProcessModel.KINEMATIC_BICYCLE:
        # No wheel-slip assumption: lateral velocity at the rear axle is
        # zero, so body v_y relaxes toward l_r * r instead of integrating
        # the (unobservable without GNSS/GSS) lateral accelerometer.
        dx[IVY] = (cfg.rear_axle_offset * r - vy) / cfg.vy_relax_tau
    return dx


def _dynamics_jacobian(x: np.ndarray, model: ProcessModel, cfg: EkfConfig) -> np.ndarray:
    c, s = math.cos(x[IPSI]), math.sin(x[IPSI])
    vx, vy, r = x[IVX], x[IVY], x[IR]
    A = np.zeros((STATE_DIM, STATE_DIM))
    A[IX, IPSI] = -s * vx - c * vy
    A[IX, IVX] = c
    A[IX, IVY] = -s
    A[IY, IPSI] = c * vx - s * vy
    A[IY, IVX] = s
    A[IY, IVY] = c
    A[IPSI, IR] = 1.0
    A[IVX, IVY] = r
    A[IVX, IR] = vy
    A[IVX, IAX] = 1.0
    A[IVY, IVX] = -r
    A[IVY, IR] = -vx
    A[IVY, IAY] = 1.0
    if model is ProcessModel.KINEMATIC_BICYCLE:
        A[IVY, :] = 0.0
        A[IVY, IVY] = -1.0 / cfg.vy_relax_tau
        A[IVY, IR] = cfg.rear_axle_offset / cfg.vy_relax_tau
    return A


def rk4_step(
    x: np.ndarray, dt: float, model: ProcessModel, cfg: EkfConfig
) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step of the process model and its exact discrete Jacobian."""
    k1 = _dynamics(x, model, cfg)
    x2 = x + 0.5 * dt * k1
    k2 = _dynamics(x2, model, cfg)
    x3 = x + 0.5 * dt * k2
    k3 = _dynamics(x3, model, cfg)
    x4 = x + dt * k3
    k4 = _dynamics(x4, model, cfg)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    eye = np.eye(STATE_DIM)
    K1 = _dynamics_jacobian(x, model, cfg)
    K2 = _dynamics_jacobian(x2, model, cfg) @ (eye + 0.5 * dt * K1)
    K3 = _dynamics_jacobian(x3, model, cfg) @ (eye + 0.5 * dt * K2)
    K4 = _dynamics_jacobian(x4, model, cfg) @ (eye + dt * K3)
    F = eye + (dt / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    return x_next, F


class Ekf:
    """Error-gated EKF over the 8-dimensional vehicle state."""

    def __init__(
        self,
        x0: np.ndarray,
        p0: np.ndarray,
        config: EkfConfig | None = None,
    ):
        self.cfg = config or EkfConfig()
        self.x = np.array(x0, dtype=float).copy()
        self.P = np.array(p0, dtype=float).copy()
        if self.x.shape != (STATE_DIM,) or self.P.shape != (STATE_DIM, STATE_DIM):
            raise ValueError("state must be 8-dimensional")
        self.model = ProcessModel.RIGID_BODY
        self.rejections = 0

    # -- prediction --------------------------------------------------------

    def predict(self, dt: float, model: ProcessModel | None = None) -> None:
        """Propagate mean (RK4) and covariance (linearized) by ``dt``."""
        if not 0.0 < dt <= 0.1:
            raise ValueError(f"dt must be in (0, 0.1], got {dt}")
        if model is not None:
            self.model = model
        self.x, F = rk4_step(self.x, dt, self.model, self.cfg)
        self.x[IPSI] = wrap_angle(self.x[IPSI])
        Q = np.diag(self.cfg.process_psd) * dt
        self.P = F @ self.P @ F.T + Q
        self.P = 0.5 * (self.P + self.P.T)
        self._check_finite()

    # -- measurement updates -----------------------------------------------

    def _apply(
        self,
        z: np.ndarray,
        predicted: np.ndarray,
        H: np.ndarray,
        R: np.ndarray,
        angular: int | None = None,
    ) -> None:
        innovation = z - predicted
        if angular is not None:
            innovation[angular] = wrap_angle(innovation[angular])
        S = H @ self.P @ H.T + R
        try:
            S_inv = np.linalg.inv(S)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(str(exc)) from exc
        d2 = float(innovation @ S_inv @ innovation)
        if not math.isfinite(d2):
            raise SingularInnovation("non-finite Mahalanobis distance")
        if d2 > _GATE[len(z)]:
            self.rejections += 1
            raise MeasurementRejected(
                f"d2={d2:.2f} > gate={_GATE[len(z)]:.2f} (dof={len(z)})"
            )
        K = self.P @ H.T @ S_inv
        self.x = self.x + K @ innovation
        self.x[IPSI] = wrap_angle(self.x[IPSI])
        # Joseph form keeps P symmetric PSD even with a suboptimal gain.
        IKH = np.eye(STATE_DIM) - K @ H
        self.P = IKH @ self.P @ IKH.T + K @ R @ K.T
        self.P = 0.5 * (self.P + self.P.T)
        self._check_finite()

    def update(
        self, meas: GnssPose | GnssVel | ImuAccel | ImuYawRate | GssVel
    ) -> None:
        """Fuse one measurement; raises MeasurementRejected on gate failure."""
        if isinstance(meas, GnssPose):
            H = np.zeros((3, STATE_DIM))
            H[0, IX] = H[1, IY] = H[2, IPSI] = 1.0
            z = np.array([meas.x, meas.y, meas.psi])
            self._apply(z, self.x[[IX, IY, IPSI]], H, np.asarray(meas.cov), angular=2)
        elif isinstance(meas, GnssVel):
            H = np.zeros((2, STATE_DIM))
            H[0, IVX] = H[1, IVY] = 1.0
            z = np.array([meas.vx, meas.vy])
            self._apply(z, self.x[[IVX, IVY]], H, np.asarray(meas.cov))
        elif isinstance(meas, ImuAccel):
            H = np.zeros((2, STATE_DIM))
            H[0, IAX] = H[1, IAY] = 1.0
            z = np.array([meas.ax, meas.ay])
            self._apply(z, self.x[[IAX, IAY]], H, np.asarray(meas.cov))
        elif isinstance(meas, ImuYawRate):
            H = np.zeros((1, STATE_DIM))
            H[0, IR] = 1.0
            self._apply(
                np.array([meas.r]), self.x[[IR]], H, np.array([[meas.var]])
            )
        elif isinstance(meas, GssVel):
            px, py = self.cfg.gss_offset
            H = np.zeros((2, STATE_DIM))
            H[0, IVX] = 1.0
            H[0, IR] = -py
            H[1, IVY] = 1.0
            H[1, IR] = px
            z = np.array([meas.vx, meas.vy])
            predicted = gss_predicted_velocity(
                self.x[IVX], self.x[IVY], self.x[IR], self.cfg.gss_offset
            )
            self._apply(z, predicted, H, np.asarray(meas.cov))
        else:
            raise TypeError(f"unknown measurement type {type(meas)!r}")

    # -- combined tick -----------------------------------------------------

    def step(
        self,
        dt: float,
        status: SensorStatus,
        measurements: list,
    ) -> int:
        """Predict, then fuse every measurement the failure ladder allows.

        Returns the number of measurements fused. Gated outliers are
        counted in ``self.rejections`` but do not raise here.
        """
        if not status.imu_ok and not status.gnss_ok and not status.gss_ok:
            raise TerminalSensorFault("GNSS, GSS, and IMU all unavailable")

        both_velocity_sources_down = not status.gnss_ok and not status.gss_ok
        self.model = (
            ProcessModel.KINEMATIC_BICYCLE
            if both_velocity_sources_down
            else ProcessModel.RIGID_BODY
        )
        self.predict(dt)

        fused = 0
        for meas in measurements:
            if isinstance(meas, (GnssPose, GnssVel)) and not status.gnss_ok:
                continue
            if isinstance(meas, GssVel) and not status.gss_ok:
                continue
            if isinstance(meas, (ImuAccel, ImuYawRate)) and not status.imu_ok:
                continue
            try:
                self.update(meas)
                fused += 1
            except MeasurementRejected:
                pass

        if both_velocity_sources_down:
            # Soft zero-slip constraint; keeps v_y (and with it the dead
            # reckoning) from wandering while only the IMU is alive.
            sigma = self.cfg.vy_pseudo_sigma
            H = np.zeros((1, STATE_DIM))
            H[0, IVY] = 1.0
            try:
                self._apply(
                    np.array([self.cfg.rear_axle_offset * self.x[IR]]),
                    self.x[[IVY]],
                    H,
                    np.array([[sigma * sigma]]),
                )
                fused += 1
            except MeasurementRejected:
                pass
        return fused

    # -- helpers -------------------------------------------------------------

    def _check_finite(self) -> None:
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.P))):
            raise NonFiniteState("state or covariance diverged")

    @property
    def pose(self) -> np.ndarray:
        return self.x[[IX, IY, IPSI]].copy()

    @property
    def twist(self) -> np.ndarray:
        return self.x[[IVX, IVY, IR]].copy()
