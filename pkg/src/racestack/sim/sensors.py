"""Sensor emulation: navigation measurements and cone detections.

Every sample is drawn from a seeded stream, so a rerun with the same seed
and configuration reproduces the measurement sequence bit for bit. Outage
windows silence a sensor completely: during the window no measurement of
that kind is emitted and the health flag handed to the estimator goes
false.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ConeColor, Pose2, RngStream
from ..estimation import (
    GnssPose,
    GnssVel,
    GssVel,
    ImuAccel,
    ImuYawRate,
    SensorStatus,
    gss_predicted_velocity,
)
from ..perception import ConeObservation
from .tracks import TrackDefinition
from .world import World


@dataclass
class NoiseConfig:
    """One-sigma noise levels and detection geometry."""

    gnss_pos_sigma: float = 0.02
    gnss_heading_sigma_deg: float = 0.2
    gnss_vel_sigma: float = 0.05
    gss_vel_sigma: float = 0.02
    imu_accel_sigma: float = 0.05
    imu_gyro_sigma: float = 0.005
    cone_bearing_sigma_deg: float = 0.5
    cone_range_sigma_at_ref: float = 0.4  # quadratic growth, sigma at ref range
    cone_range_ref: float = 20.0
    detection_range: float = 20.0
    hfov_deg: float = 125.0
    color_confusion_prob: float = 0.02


@dataclass(frozen=True)
class Outage:
    """Half-open [start, end) window during which a sensor is dead."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if self.start < 0.0 or self.end <= self.start:
            raise ValueError(f"bad outage window [{self.start}, {self.end})")

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


def parse_outage(text: str) -> Outage:
    """Parse a START:END seconds pair, e.g. '10:40'."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ValueError(f"outage must be START:END, got {text!r}")
    return Outage(float(parts[0]), float(parts[1]))


@dataclass
class SensorFrame:
    """Everything the stack receives in one control tick."""

    status: SensorStatus
    measurements: list
    cones: list[ConeObservation]


class SensorRig:
    """Draws one frame of noisy measurements per tick from the truth state."""

    def __init__(
        self,
        track: TrackDefinition,
        noise: NoiseConfig,
        rng: RngStream,
        gss_offset: tuple[float, float] = (-1.5, 0.0),
        gnss_outage: Outage | None = None,
        gss_outage: Outage | None = None,
    ):
        self.track = track
        self.noise = noise
        self.gen = rng.gen
        self.gss_offset = gss_offset
        self.gnss_outage = gnss_outage
        self.gss_outage = gss_outage

    def sense(self, world: World, t: float) -> SensorFrame:
        n = self.noise
        gen = self.gen
        gnss_ok = self.gnss_outage is None or not self.gnss_outage.active(t)
        gss_ok = self.gss_outage is None or not self.gss_outage.active(t)
        status = SensorStatus(gnss_ok=gnss_ok, gss_ok=gss_ok, imu_ok=True)

        pose = world.pose
        twist = world.twist
        measurements: list = []

        if gnss_ok:
            sh = math.radians(n.gnss_heading_sigma_deg)
            e = gen.normal(0.0, 1.0, 5)
            measurements.append(
                GnssPose(
                    x=pose.x + e[0] * n.gnss_pos_sigma,
                    y=pose.y + e[1] * n.gnss_pos_sigma,
                    psi=pose.psi + e[2] * sh,
                    cov=np.diag([n.gnss_pos_sigma**2, n.gnss_pos_sigma**2, sh**2]),
                )
            )
            measurements.append(
                GnssVel(
                    vx=twist.vx + e[3] * n.gnss_vel_sigma,
                    vy=twist.vy + e[4] * n.gnss_vel_sigma,
                    cov=np.eye(2) * n.gnss_vel_sigma**2,
                )
            )

        if gss_ok:
            v_gss = gss_predicted_velocity(
                twist.vx, twist.vy, twist.r, self.gss_offset
            )
            e = gen.normal(0.0, 1.0, 2)
            measurements.append(
                GssVel(
                    vx=float(v_gss[0]) + e[0] * n.gss_vel_sigma,
                    vy=float(v_gss[1]) + e[1] * n.gss_vel_sigma,
                    cov=np.eye(2) * n.gss_vel_sigma**2,
                )
            )

        ax, ay = world.body_accel()
        e = gen.normal(0.0, 1.0, 3)
        measurements.append(
            ImuAccel(
                ax=ax + e[0] * n.imu_accel_sigma,
                ay=ay + e[1] * n.imu_accel_sigma,
                cov=np.eye(2) * n.imu_accel_sigma**2,
            )
        )
        measurements.append(
            ImuYawRate(r=twist.r + e[2] * n.imu_gyro_sigma, var=n.imu_gyro_sigma**2)
        )

        cones = self._sense_cones(pose)
        return SensorFrame(status=status, measurements=measurements, cones=cones)

    def _sense_cones(self, pose: Pose2) -> list[ConeObservation]:
        """Range-bearing cone detections inside the sensor's footprint.

        Range noise grows quadratically with distance; the reported
        covariance is the range-bearing noise pushed into the vehicle
        frame at the measured point.
        """
        n = self.noise
        gen = self.gen
        c, s = math.cos(pose.psi), math.sin(pose.psi)
        rel = self.track.cones_xy - np.array([pose.x, pose.y])
        xb = c * rel[:, 0] + s * rel[:, 1]
        yb = -s * rel[:, 0] + c * rel[:, 1]
        rng_true = np.hypot(xb, yb)
        bearing = np.arctan2(yb, xb)
        half_fov = math.radians(n.hfov_deg / 2.0)
        visible = np.flatnonzero(
            (rng_true <= n.detection_range)
            & (np.abs(bearing) <= half_fov)
            & (rng_true > 0.5)
        )

        sb = math.radians(n.cone_bearing_sigma_deg)
        out: list[ConeObservation] = []
        for i in visible:
            d = float(rng_true[i])
            sr = max(n.cone_range_sigma_at_ref * (d / n.cone_range_ref) ** 2, 0.01)
            e = gen.normal(0.0, 1.0, 2)
            d_m = max(d + e[0] * sr, 0.05)
            b_m = float(bearing[i]) + e[1] * sb
            cb, sbb = math.cos(b_m), math.sin(b_m)
            position = np.array([d_m * cb, d_m * sbb])
            J = np.array([[cb, -d_m * sbb], [sbb, d_m * cb]])
            cov = J @ np.diag([sr**2, sb**2]) @ J.T
            color = ConeColor(int(self.track.cone_colors[i]))
            if gen.uniform() < n.color_confusion_prob:
                color = ConeColor.UNKNOWN
            out.append(
                ConeObservation(
                    position=position, cov=cov, color=color, color_confidence=1.0
                )
            )
        return out
