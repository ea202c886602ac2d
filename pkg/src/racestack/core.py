"""Shared geometry, cone taxonomy, and seeded randomness.

Everything downstream (estimation, SLAM, planning, control, the simulator)
agrees on the conventions fixed here: a Z-up world frame, a vehicle frame
with x forward / y left, heading measured counter-clockwise from world x,
and angles normalized to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    wrapped = (angle + math.pi) % TWO_PI - math.pi
    # The modulo above yields [-pi, pi); fold the single excluded endpoint.
    if wrapped == -math.pi:
        return math.pi
    return wrapped


def angle_diff(a: float, b: float) -> float:
    """Signed shortest rotation from ``b`` to ``a``, in (-pi, pi]."""
    return wrap_angle(a - b)


def wrap_angle_array(angles: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`. Maps -pi to pi elementwise."""
    wrapped = (np.asarray(angles, dtype=float) + math.pi) % TWO_PI - math.pi
    return np.where(wrapped == -math.pi, math.pi, wrapped)


class ConeColor(IntEnum):
    """Track marker classes. Blue marks the left edge, yellow the right."""

    BLUE = 0
    YELLOW = 1
    ORANGE_SMALL = 2
    ORANGE_LARGE = 3
    UNKNOWN = 4


N_COLORS = 5


def color_scores(color: ConeColor, confidence: float = 1.0) -> np.ndarray:
    """One-hot evidence vector for a single classification."""
    scores = np.zeros(N_COLORS)
    scores[int(color)] = confidence
    return scores


def dominant_color(evidence: np.ndarray, min_margin: float = 0.0) -> ConeColor:
    """Color with the most accumulated evidence.

    Returns UNKNOWN when no class leads the runner-up by ``min_margin``
    or when there is no evidence at all.
    """
    ev = np.asarray(evidence, dtype=float)
    if ev.sum() <= 0.0:
        return ConeColor.UNKNOWN
    order = np.argsort(ev)
    if ev[order[-1]] - ev[order[-2]] < min_margin:
        return ConeColor.UNKNOWN
    return ConeColor(int(order[-1]))


@dataclass(frozen=True, slots=True)
class Pose2:
    """Planar pose (x, y, psi) with psi stored normalized."""

    x: float
    y: float
    psi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True, slots=True)
class Twist2:
    """Body-frame velocity: longitudinal, lateral, and yaw rate."""

    vx: float
    vy: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.r])


def rotation2(psi: float) -> np.ndarray:
    """2x2 rotation matrix for a counter-clockwise angle psi."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


def vehicle_to_world(pose: Pose2, point: np.ndarray) -> np.ndarray:
    """Map a vehicle-frame point (x forward, y left) into the world frame."""
    p = np.asarray(point, dtype=float)
    return rotation2(pose.psi) @ p + pose.xy


def world_to_vehicle(pose: Pose2, point: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vehicle_to_world` for the same pose."""
    p = np.asarray(point, dtype=float)
    return rotation2(pose.psi).T @ (p - pose.xy)


class RngStream:
    """Seeded, hierarchical random stream.

    Identical (seed, key) pairs always reproduce the same draw sequence,
    independent of what any sibling stream consumed. Children are derived
    deterministically, so per-subsystem streams stay decoupled: adding a
    draw in the SLAM stream never perturbs the sensor stream.
    """

    __slots__ = ("seed", "key", "gen")

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent stream; same ids give the same stream."""
        return RngStream(self.seed, self.key + tuple(ids))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"
