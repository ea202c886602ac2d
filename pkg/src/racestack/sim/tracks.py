"""Track synthesis and truth-centerline geometry.

Three track families:

* a straight acceleration corridor with a cone wall every few meters and a
  large-orange finish gate,
* the figure-eight handling course loaded from the packaged cone map,
* random closed loops for the two free-driving missions, drawn as a radial
  Fourier perturbation of a circle so the curve is star-shaped (it cannot
  cross itself) and its curvature can be bounded in closed form.

Loops are rejected and redrawn when the curvature bound or the cone-wall
separation check fails; persistent failure raises GenerationFailed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..centerline import hardcoded_centerline
from ..core import ConeColor, Pose2, RngStream
from ..slam import load_skidpad_geometry, skidpad_prior
from ..spline import resample_polyline


class GenerationFailed(RuntimeError):
    """No admissible track found within the retry budget."""


@dataclass
class TrackConfig:
    """Geometry knobs for every track family."""

    accel_width: float = 3.2
    accel_length: float = 75.0
    accel_margin: float = 15.0  # cone wall continues past the finish line
    accel_cone_spacing: float = 5.0
    loop_radius_range: tuple[float, float] = (18.0, 26.0)
    loop_width: float = 3.5
    loop_cone_spacing: float = 4.0
    loop_min_radius: float = 6.0
    loop_harmonics: int = 4  # radial modes k = 2 .. loop_harmonics + 1
    loop_ripple: float = 0.22  # total relative radial amplitude budget
    max_attempts: int = 20
    min_corridor_width: float = 2.5


@dataclass
class TrackDefinition:
    """Ground-truth geometry handed to the world, sensors, and scoring."""

    mission: str
    centerline: np.ndarray  # (K, 2) dense truth centerline
    width: float  # cone-to-cone corridor width [m]
    cones_xy: np.ndarray  # (M, 2)
    cone_colors: np.ndarray  # (M,) ConeColor values
    start: Pose2
    closed: bool
    length: float  # centerline arc length [m]
    finish_s: float  # progress at which the mission (or one lap) completes

    def __post_init__(self) -> None:
        if self.width < 2.5:
            raise GenerationFailed(
                f"corridor width {self.width:.2f} m below the 2.5 m minimum"
            )


class PolylineProgress:
    """Incremental projection of a moving point onto a dense polyline.

    Tracks arc-length progress by searching only a window around the
    previous projection, so per-tick cost stays constant and the projection
    cannot jump across the midfield of a figure-eight or a closed loop.
    """

    def __init__(self, points: np.ndarray, closed: bool = False):
        pts = np.asarray(points, dtype=float)
        if closed and not np.allclose(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[0]])
        self.pts = pts
        d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(d <= 1e-12):
            keep = np.concatenate([[True], d > 1e-12])
            self.pts = pts = pts[keep]
            d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(d)])
        self.length = float(self.cum[-1])
        self.closed = closed
        self._seg = np.diff(pts, axis=0)
        self._len = d

    def project(
        self, xy: np.ndarray, s_prev: float, window: float = 15.0
    ) -> tuple[float, float]:
        """Arc-length position and lateral distance of ``xy``.

        Only segments within ``window`` meters of arc length from
        ``s_prev`` are considered.
        """
        L = self.length
        if self.closed:
            s_prev = s_prev % L
        lo, hi = s_prev - window, s_prev + window
        idx = np.flatnonzero((self.cum[:-1] < hi) & (self.cum[1:] > lo))
        if self.closed:
            extra = []
            if lo < 0.0:
                extra.append(np.flatnonzero(self.cum[1:] > lo + L))
            if hi > L:
                extra.append(np.flatnonzero(self.cum[:-1] < hi - L))
            if extra:
                idx = np.unique(np.concatenate([idx, *extra]))
        if idx.size == 0:
            idx = np.arange(len(self._seg))

        p = np.asarray(xy, dtype=float)
        a = self.pts[idx]
        seg = self._seg[idx]
        ln = self._len[idx]
        t = np.clip(np.einsum("ij,ij->i", p - a, seg) / ln**2, 0.0, 1.0)
        foot = a + t[:, None] * seg
        dist = np.linalg.norm(foot - p, axis=1)
        k = int(np.argmin(dist))
        s = float(self.cum[idx[k]] + t[k] * ln[k])
        return s, float(dist[k])


# --- track families ----------------------------------------------------------


def _acceleration_track(cfg: TrackConfig) -> TrackDefinition:
    """Straight corridor; mirrors the localization prior's cone layout."""
    total = cfg.accel_length + cfg.accel_margin
    xs = np.arange(0.0, total + 1e-9, cfg.accel_cone_spacing)
    half = cfg.accel_width / 2.0
    cones = []
    colors = []
    for x in xs:
        cones.append((x, +half))
        colors.append(ConeColor.BLUE)
        cones.append((x, -half))
        colors.append(ConeColor.YELLOW)
    cones.append((cfg.accel_length, +half))
    colors.append(ConeColor.ORANGE_LARGE)
    cones.append((cfg.accel_length, -half))
    colors.append(ConeColor.ORANGE_LARGE)

    line_x = np.arange(0.0, total + 1e-9, 1.0)
    centerline = np.column_stack([line_x, np.zeros_like(line_x)])
    return TrackDefinition(
        mission="acceleration",
        centerline=centerline,
        width=cfg.accel_width,
        cones_xy=np.array(cones),
        cone_colors=np.array([int(c) for c in colors]),
        start=Pose2(0.0, 0.0, 0.0),
        closed=False,
        length=total,
        finish_s=cfg.accel_length,
    )


def _skidpad_track() -> TrackDefinition:
    """Figure-eight from the packaged cone map; truth frame == prior frame."""
    geo = load_skidpad_geometry()
    prior = skidpad_prior()
    centers = hardcoded_centerline("skidpad").centers
    seg = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    length = float(seg.sum())
    return TrackDefinition(
        mission="skidpad",
        centerline=centers,
        width=2.0 * float(geo["corridor_half_width"]),
        cones_xy=np.array([xy for xy, _ in prior]),
        cone_colors=np.array([int(c) for _, c in prior]),
        start=Pose2(-float(geo["entry_length"]), 0.0, 0.0),
        closed=False,
        length=length,
        finish_s=length - 0.5,
    )


def _radial_profile(
    theta: np.ndarray, r0: float, amp: np.ndarray, phase: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """r(theta) and its first two derivatives for the Fourier loop."""
    r = np.full_like(theta, r0)
    dr = np.zeros_like(theta)
    ddr = np.zeros_like(theta)
    for i, (a, ph) in enumerate(zip(amp, phase)):
        k = i + 2
        arg = k * theta + ph
        r += a * np.cos(arg)
        dr += -a * k * np.sin(arg)
        ddr += -a * k * k * np.cos(arg)
    return r, dr, ddr


def _polar_curvature(r: np.ndarray, dr: np.ndarray, ddr: np.ndarray) -> np.ndarray:
    num = r * r + 2.0 * dr * dr - r * ddr
    den = (r * r + dr * dr) ** 1.5
    return num / den


def _segments_intersect(p: np.ndarray, closed: bool) -> bool:
    """Any two non-adjacent segments of the polyline cross."""
    a = p[:-1]
    b = p[1:]
    n = len(a)
    d = b - a
    for i in range(n - 2):
        j0 = i + 2
        j1 = n if not (closed and i == 0) else n - 1
        if j0 >= j1:
            continue
        # solve a_i + t d_i == a_j + u d_j for each later segment j
        aj = a[j0:j1]
        dj = d[j0:j1]
        denom = d[i, 0] * dj[:, 1] - d[i, 1] * dj[:, 0]
        rel = aj - a[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (rel[:, 0] * dj[:, 1] - rel[:, 1] * dj[:, 0]) / denom
            u = (rel[:, 0] * d[i, 1] - rel[:, 1] * d[i, 0]) / denom
        hit = (
            np.isfinite(t)
            & np.isfinite(u)
            & (t > 0.0)
            & (t < 1.0)
            & (u > 0.0)
            & (u < 1.0)
        )
        if np.any(hit):
            return True
    return False


def _loop_track(mission: str, rng: RngStream, cfg: TrackConfig) -> TrackDefinition:
    """Random closed course with bounded curvature and parallel cone walls."""
    gen = rng.gen
    half = cfg.loop_width / 2.0
    for _ in range(cfg.max_attempts):
        r0 = gen.uniform(*cfg.loop_radius_range)
        n_h = cfg.loop_harmonics
        frac = gen.uniform(0.3, 1.0, n_h)
        frac *= cfg.loop_ripple / frac.sum()
        ks = np.arange(2, 2 + n_h)
        amp = r0 * frac / np.maximum(1.0, ks / 2.0)
        phase = gen.uniform(0.0, 2.0 * math.pi, n_h)

        theta = np.linspace(0.0, 2.0 * math.pi, 720, endpoint=False)
        r, dr, ddr = _radial_profile(theta, r0, amp, phase)
        kappa = _polar_curvature(r, dr, ddr)
        # cone walls sit half a corridor off the centerline; the tighter
        # (inner) wall must keep a positive radius with margin
        if np.max(np.abs(kappa)) > 1.0 / cfg.loop_min_radius:
            continue
        if np.min(r) <= 2.0 * half:
            continue

        dense = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        centers = resample_polyline(dense, cfg.loop_cone_spacing, closed=True)
        tang = np.roll(centers, -1, axis=0) - np.roll(centers, 1, axis=0)
        tang /= np.linalg.norm(tang, axis=1, keepdims=True)
        left = np.column_stack([-tang[:, 1], tang[:, 0]])
        blue = centers + half * left
        yellow = centers - half * left
        if _segments_intersect(np.vstack([blue, blue[:1]]), closed=True):
            continue
        if _segments_intersect(np.vstack([yellow, yellow[:1]]), closed=True):
            continue
        # opposing walls may not pinch the corridor anywhere
        gap = _min_wall_gap(blue, yellow)
        if gap < cfg.min_corridor_width:
            continue

        line = resample_polyline(dense, 1.0, closed=True)
        seg = np.linalg.norm(
            np.diff(np.vstack([line, line[:1]]), axis=0), axis=1
        )
        length = float(seg.sum())
        t0 = centers[1] - centers[-1]
        psi0 = math.atan2(t0[1], t0[0])
        cones_xy = np.vstack([blue, yellow])
        colors = np.array(
            [int(ConeColor.BLUE)] * len(blue) + [int(ConeColor.YELLOW)] * len(yellow)
        )
        return TrackDefinition(
            mission=mission,
            centerline=line,
            width=cfg.loop_width,
            cones_xy=cones_xy,
            cone_colors=colors,
            start=Pose2(float(centers[0, 0]), float(centers[0, 1]), psi0),
            closed=True,
            length=length,
            finish_s=length,
        )
    raise GenerationFailed(
        f"no admissible {mission} loop in {cfg.max_attempts} attempts"
    )


def _min_wall_gap(blue: np.ndarray, yellow: np.ndarray) -> float:
    """Smallest distance from any blue cone to the yellow wall (exact enough
    at cone spacing resolution for a pinch check)."""
    d = np.linalg.norm(blue[:, None, :] - yellow[None, :, :], axis=2)
    return float(d.min())


def generate_track(
    mission: str, rng: RngStream, cfg: TrackConfig | None = None
) -> TrackDefinition:
    """Build the ground-truth track for a mission; seeded and reproducible."""
    cfg = cfg or TrackConfig()
    if mission == "acceleration":
        return _acceleration_track(cfg)
    if mission == "skidpad":
        return _skidpad_track()
    if mission in ("autocross", "trackdrive"):
        return _loop_track(mission, rng, cfg)
    raise ValueError(f"unknown mission {mission!r}")
