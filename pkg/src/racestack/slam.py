"""Particle-filter landmark SLAM over cone observations.

Each particle carries a pose hypothesis and its own map of cone landmarks,
every landmark a little 2D Kalman filter plus bookkeeping: how often it
was seen versus missed (its quality) and accumulated color evidence.

Per tick the filter
  1. propagates every particle with the odometry twist plus sampled noise,
  2. associates each observation per particle: the measurement likelihood

         w_m = exp(-0.5 * z_d' S^-1 z_d) / (2 pi sqrt(det S)),

     with S the landmark covariance plus the (pose-rotated) observation
     covariance, picks uniformly among candidates within 20% of the best
     likelihood, and either updates the matched landmark or inserts a new
     one when even the best likelihood falls below the new-landmark
     threshold,
  3. multiplies the particle weight (kept in log space) by w_m for every
     match, by a fixed penalty w_nc per unmatched observation, w_no per
     mapped cone that should have been visible but was not, w_or per
     observation beyond trusted sensor range, and by Gaussian factors for
     the offset between the particle pose and the GNSS pose when present,
  4. resamples systematically when the effective particle count drops
     below half, re-seating 20% of the survivors with exploration noise.

Landmarks whose quality n_seen / (n_seen + n_missed) drops below 0.5 are
deleted (mapping mode only). Freezing the map switches the filter to pure
localization: association and weighting continue, map writes stop.

Mission priors: Skidpad runs against a fixed figure-eight map loaded from
a data file; Acceleration seeds each particle with a straight corridor
whose track width is sampled per particle, so the width itself is
estimated by the filter. Both start frozen (localization mode).

The hot loop is vectorized across particles: landmark state lives in
(n_particles, max_landmarks, ...) arrays with covariances packed as
(a, b, c) for [[a, b], [b, c]]. Scalar single-particle versions of the
core steps are kept alongside as the readable reference; tests pin the
vectorized engine against them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

from racestack._jit import maybe_njit
from racestack.core import (
    ConeColor,
    N_COLORS,
    Pose2,
    RngStream,
    Twist2,
    color_scores,
    dominant_color,
    rotation2,
    wrap_angle,
    wrap_angle_array,
)

LOG_2PI = math.log(2.0 * math.pi)


class SlamError(Exception):
    pass


class MapFull(SlamError):
    """A particle ran out of landmark slots; observation ignored."""


@dataclass(slots=True)
class SlamConfig:
    n_particles: int = 500
    max_landmarks: int = 256
    # association
    match_radius: float = 25.0  # consider landmarks this close to the car [m]
    candidate_ratio: float = 0.8  # near-ties within 20% of the best match
    # weighting
    w_no: float = 0.4  # mapped cone expected but not observed
    w_or: float = 0.9  # observation beyond trusted sensor range
    w_nc: float = 0.3  # observation matching no landmark (mapping)
    w_nc_localization: float = 0.7  # same, once the map is frozen
    # what "expected visible" means for the w_no penalty
    sensor_range: float = 20.0
    sensor_fov_deg: float = 125.0
    visibility_margin: float = 0.85  # shrink range/FOV to dodge edge flicker
    # landmark lifecycle
    quality_min: float = 0.5
    new_landmark_sigma: float = 0.5  # extra std for a fresh landmark [m]
    # particle prediction noise, per tick
    predict_xy_sigma: float = 0.02
    predict_psi_sigma: float = 0.004
    # resampling
    resample_ratio: float = 0.5  # resample when n_eff < ratio * N
    explore_frac: float = 0.2
    explore_xy_sigma: float = 0.05
    explore_psi_sigma: float = 0.01
    # pose-anchor weighting floor; keeps a filtered anchor from claiming
    # better than RTK-grade certainty, not from dominating cone matches
    gnss_xy_sigma_floor: float = 0.02
    gnss_psi_sigma_floor: float = 0.008
    # mission priors
    prior_cone_sigma: float = 0.3
    accel_width_range: tuple[float, float] = (2.5, 4.0)
    accel_cone_spacing: float = 5.0
    accel_length: float = 75.0


class SlamMode(Enum):
    MAPPING = "mapping"
    LOCALIZATION = "localization"


# --- scalar reference pieces -------------------------------------------------


@dataclass(slots=True)
class ConeLandmark:
    mean: np.ndarray  # (2,) world frame
    cov: np.ndarray  # (2, 2)
    n_seen: int = 1
    n_missed: int = 0
    color_evidence: np.ndarray = field(default_factory=lambda: np.zeros(N_COLORS))

    @property
    def quality(self) -> float:
        return self.n_seen / (self.n_seen + self.n_missed)


@dataclass(slots=True)
class Particle:
    pose: Pose2
    landmarks: list[ConeLandmark]
    log_weight: float = 0.0
    track_width: float | None = None


def match_weight(innovation: np.ndarray, cov: np.ndarray) -> float:
    """Gaussian match likelihood of an innovation under a 2x2 covariance."""
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0.0:
        raise SlamError("non positive definite association covariance")
    e = innovation
    md2 = (
        cov[1, 1] * e[0] * e[0]
        - 2.0 * cov[0, 1] * e[0] * e[1]
        + cov[0, 0] * e[1] * e[1]
    ) / det
    return math.exp(-0.5 * md2) / (2.0 * math.pi * math.sqrt(det))


def associate(
    particle: Particle,
    z_world: np.ndarray,
    z_cov: np.ndarray,
    cfg: SlamConfig,
    rng: RngStream,
    mode: SlamMode = SlamMode.MAPPING,
) -> tuple[int | None, float]:
    """Pick the landmark an observation belongs to, or None for a new cone.

    Candidates are landmarks within ``match_radius`` of the car whose match
    likelihood is within 20% of the best; one of them is chosen uniformly
    at random. Returns (index, w_m). (None, w_m_best) means new landmark.
    """
    car = particle.pose.xy
    weights = []
    for idx, lm in enumerate(particle.landmarks):
        if np.linalg.norm(lm.mean - car) > cfg.match_radius:
            continue
        w = match_weight(z_world - lm.mean, lm.cov + z_cov)
        weights.append((idx, w))
    if not weights:
        return None, 0.0
    best = max(w for _, w in weights)
    if best < _new_threshold(cfg, mode):
        return None, best
    candidates = [iw for iw in weights if iw[1] >= cfg.candidate_ratio * best]
    pick = candidates[int(rng.gen.integers(len(candidates)))]
    return pick


def update_landmark(lm: ConeLandmark, z_world: np.ndarray, z_cov: np.ndarray) -> None:
    """Standard Kalman update with identity measurement model."""
    S = lm.cov + z_cov
    K = lm.cov @ np.linalg.inv(S)
    lm.mean = lm.mean + K @ (z_world - lm.mean)
    lm.cov = (np.eye(2) - K) @ lm.cov
    lm.cov = 0.5 * (lm.cov + lm.cov.T)
    lm.n_seen += 1


def weigh_particle(
    log_weight: float,
    match_likelihoods: list[float],
    n_unobserved: int,
    n_out_of_range: int,
    n_unmatched: int,
    cfg: SlamConfig,
    pose_offset: np.ndarray | None = None,
    pose_sigmas: np.ndarray | None = None,
) -> float:
    """Accumulate the per-tick weight product in log space."""
    lw = log_weight
    lw += n_unobserved * math.log(cfg.w_no)
    lw += n_out_of_range * math.log(cfg.w_or)
    lw += n_unmatched * math.log(cfg.w_nc)
    for w in match_likelihoods:
        if w <= 0.0:
            return -np.inf
        lw += math.log(w)
    if pose_offset is not None:
        for e, s in zip(pose_offset, pose_sigmas):
            lw += -0.5 * (e / s) ** 2 - math.log(s) - 0.5 * LOG_2PI
    return lw


def effective_count(weights: np.ndarray) -> float:
    """Inverse participation ratio of normalized weights."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0.0:
        raise SlamError("weights sum to zero")
    w = w / total
    return float(1.0 / np.sum(w * w))


def systematic_resample_indices(weights: np.ndarray, offset: float) -> np.ndarray:
    """Low-variance resampling with a single uniform offset in [0, 1/N)."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if not 0.0 <= offset < 1.0 / n:
        raise ValueError("offset must lie in [0, 1/N)")
    positions = offset + np.arange(n) / n
    cumulative = np.cumsum(w / w.sum())
    cumulative[-1] = 1.0  # guard against round-off at the top end
    return np.searchsorted(cumulative, positions, side="right").astype(np.intp)


@maybe_njit
def _assoc_kernel(pose, lm_xy, lm_cov, valid, m, ox, oy, c00, c01, c11,
                  ratio, threshold, u):
    """Associate one observation against every particle's own map.

    Fused per-particle scan over the first ``m`` landmark columns: world
    projection of the measurement, rotated noise, Gaussian match weights,
    and the uniform choice among near-tie candidates (``u`` holds one draw
    per particle). Returns everything the update step needs.
    """
    n = pose.shape[0]
    zx = np.empty(n)
    zy = np.empty(n)
    ra = np.empty(n)
    rb = np.empty(n)
    rc = np.empty(n)
    w_sel = np.zeros(n)
    choice = np.zeros(n, np.intp)
    is_match = np.zeros(n, np.bool_)
    two_pi = 2.0 * math.pi
    w_row = np.empty(m)
    for i in range(n):
        c = math.cos(pose[i, 2])
        s = math.sin(pose[i, 2])
        zx[i] = pose[i, 0] + c * ox - s * oy
        zy[i] = pose[i, 1] + s * ox + c * oy
        ra[i] = c * c * c00 - 2.0 * s * c * c01 + s * s * c11
        rb[i] = s * c * (c00 - c11) + (c * c - s * s) * c01
        rc[i] = s * s * c00 + 2.0 * s * c * c01 + c * c * c11
        best = 0.0
        for j in range(m):
            if not valid[i, j]:
                w_row[j] = 0.0
                continue
            A = lm_cov[i, j, 0] + ra[i]
            B = lm_cov[i, j, 1] + rb[i]
            C = lm_cov[i, j, 2] + rc[i]
            det = A * C - B * B
            dx = zx[i] - lm_xy[i, j, 0]
            dy = zy[i] - lm_xy[i, j, 1]
            md2 = (C * dx * dx - 2.0 * B * dx * dy + A * dy * dy) / det
            w = math.exp(-0.5 * md2) / (two_pi * math.sqrt(det))
            w_row[j] = w
            if w > best:
                best = w
        if best >= threshold:
            thr = ratio * best
            k = 0
            for j in range(m):
                if valid[i, j] and w_row[j] >= thr:
                    k += 1
            rank = int(u[i] * k)
            if rank >= k:
                rank = k - 1
            cnt = 0
            for j in range(m):
                if valid[i, j] and w_row[j] >= thr:
                    if cnt == rank:
                        choice[i] = j
                        w_sel[i] = w_row[j]
                        break
                    cnt += 1
            is_match[i] = True
    return zx, zy, ra, rb, rc, is_match, choice, w_sel


def _new_threshold(cfg: SlamConfig, mode: SlamMode) -> float:
    return cfg.w_nc if mode is SlamMode.MAPPING else cfg.w_nc_localization


# --- mission priors -----------------------------------------------------------


_COLOR_FROM_NAME = {
    "blue": ConeColor.BLUE,
    "yellow": ConeColor.YELLOW,
    "orange_small": ConeColor.ORANGE_SMALL,
    "orange_large": ConeColor.ORANGE_LARGE,
}


def load_skidpad_geometry() -> dict:
    """Skidpad cone map and drive geometry from the packaged data file."""
    text = resources.files("racestack.data").joinpath("skidpad_map.json").read_text()
    return json.loads(text)


def skidpad_prior() -> list[tuple[np.ndarray, ConeColor]]:
    geo = load_skidpad_geometry()
    return [
        (np.array([c["x"], c["y"]]), _COLOR_FROM_NAME[c["color"]])
        for c in geo["cones"]
    ]


def acceleration_prior(width: float, cfg: SlamConfig) -> list[tuple[np.ndarray, ConeColor]]:
    """Straight corridor: blue on the left, yellow on the right, large
    orange marking the finish line; prior extends past the finish so the
    braking zone stays localized."""
    half = width / 2.0
    cones = []
    xs = np.arange(0.0, cfg.accel_length + 15.0 + 1e-9, cfg.accel_cone_spacing)
    for x in xs:
        cones.append((np.array([x, +half]), ConeColor.BLUE))
        cones.append((np.array([x, -half]), ConeColor.YELLOW))
    cones.append((np.array([cfg.accel_length, +half]), ConeColor.ORANGE_LARGE))
    cones.append((np.array([cfg.accel_length, -half]), ConeColor.ORANGE_LARGE))
    return cones


# --- the vectorized filter ------------------------------------------------------


@dataclass(slots=True)
class SlamDiagnostics:
    n_eff: float
    resampled: bool
    map_size: int
    n_matched: int
    n_new: int


@dataclass(slots=True)
class MapCone:
    position: np.ndarray
    cov: np.ndarray
    color: ConeColor
    quality: float


class FastSlam:
    """Rao-Blackwellized particle filter over poses and cone maps."""

    def __init__(
        self,
        cfg: SlamConfig,
        rng: RngStream,
        start: Pose2 = Pose2(0.0, 0.0, 0.0),
    ):
        self.cfg = cfg
        self.rng = rng
        n, m = cfg.n_particles, cfg.max_landmarks
        self.mode = SlamMode.MAPPING
        self.pose = np.tile(np.array([start.x, start.y, start.psi]), (n, 1))
        self.log_w = np.full(n, -math.log(n))
        self.track_width: np.ndarray | None = None

        self.lm_xy = np.zeros((n, m, 2))
        self.lm_cov = np.zeros((n, m, 3))  # packed (a, b, c)
        self.lm_seen = np.zeros((n, m), dtype=np.int32)
        self.lm_missed = np.zeros((n, m), dtype=np.int32)
        self.lm_color = np.zeros((n, m, N_COLORS), dtype=np.float32)
        self.lm_active = np.zeros((n, m), dtype=bool)
        self.lm_count = np.zeros(n, dtype=np.intp)

        self.maps_identical = True  # enables cheap resampling
        self._matched = np.zeros((n, m), dtype=bool)
        self._map_full_reported = False
        self.n_resamples = 0
        # per-tick association gate; step() refreshes both
        self._m_hi = m
        self._valid = self.lm_active.copy()

    # -- construction helpers ------------------------------------------------

    @classmethod
    def init_mission(
        cls,
        mission: str,
        cfg: SlamConfig,
        rng: RngStream,
        start: Pose2,
    ) -> "FastSlam":
        f = cls(cfg, rng, start)
        if mission == "skidpad":
            f._seed_shared_prior(skidpad_prior())
            f.mode = SlamMode.LOCALIZATION
        elif mission == "acceleration":
            lo, hi = cfg.accel_width_range
            widths = rng.gen.uniform(lo, hi, cfg.n_particles)
            f.track_width = widths
            f._seed_width_prior(widths)
            f.mode = SlamMode.LOCALIZATION
            f.maps_identical = False
        elif mission in ("autocross", "trackdrive"):
            pass  # mapping from scratch
        else:
            raise ValueError(f"unknown mission {mission!r}")
        return f

    def _seed_shared_prior(self, cones: list[tuple[np.ndarray, ConeColor]]) -> None:
        var = self.cfg.prior_cone_sigma**2
        k = len(cones)
        if k > self.cfg.max_landmarks:
            raise SlamError("prior map exceeds landmark capacity")
        for i, (xy, color) in enumerate(cones):
            self.lm_xy[:, i] = xy
            self.lm_cov[:, i] = (var, 0.0, var)
            self.lm_color[:, i] = color_scores(color, 3.0)
        self.lm_seen[:, :k] = 3  # prior cones should survive early misses
        self.lm_active[:, :k] = True
        self.lm_count[:] = k

    def _seed_width_prior(self, widths: np.ndarray) -> None:
        cfg = self.cfg
        template = acceleration_prior(1.0, cfg)  # unit width, scaled below
        var = cfg.prior_cone_sigma**2
        k = len(template)
        if k > cfg.max_landmarks:
            raise SlamError("prior map exceeds landmark capacity")
        xs = np.array([xy[0] for xy, _ in template])
        ys = np.array([xy[1] for xy, _ in template])  # +-0.5 at unit width
        self.lm_xy[:, :k, 0] = xs[None, :]
        self.lm_xy[:, :k, 1] = ys[None, :] * widths[:, None]
        self.lm_cov[:, :k, 0] = var
        self.lm_cov[:, :k, 2] = var
        for i, (_, color) in enumerate(template):
            self.lm_color[:, i] = color_scores(color, 3.0)
        self.lm_seen[:, :k] = 3
        self.lm_active[:, :k] = True
        self.lm_count[:] = k

    # -- per-tick pipeline ------------------------------------------------------

    def predict(self, twist: Twist2, dt: float) -> None:
        """Propagate particle poses by odometry plus sampled noise."""
        cfg = self.cfg
        n = cfg.n_particles
        psi = self.pose[:, 2]
        c, s = np.cos(psi), np.sin(psi)
        dx_b = twist.vx * dt
        dy_b = twist.vy * dt
        noise = self.rng.gen.normal(0.0, 1.0, (n, 3))
        self.pose[:, 0] += c * dx_b - s * dy_b + noise[:, 0] * cfg.predict_xy_sigma
        self.pose[:, 1] += s * dx_b + c * dy_b + noise[:, 1] * cfg.predict_xy_sigma
        self.pose[:, 2] = wrap_angle_array(
            psi + twist.r * dt + noise[:, 2] * cfg.predict_psi_sigma
        )

    def step(
        self,
        twist: Twist2,
        dt: float,
        observations: list,
        gnss_pose: Pose2 | None = None,
        gnss_sigmas: np.ndarray | None = None,
    ) -> SlamDiagnostics:
        """One SLAM tick: predict, associate/update, weigh, maybe resample.

        ``observations`` are perception cone observations (vehicle-frame
        position, covariance, color scores).
        """
        cfg = self.cfg
        self.predict(twist, dt)
        self._matched[:] = False

        # Tick-constant association gate over the columns actually in use.
        # Poses are fixed for the whole tick and within-tick landmark motion
        # is centimeters against a 25 m radius, so one evaluation suffices;
        # headroom columns keep this tick's insertions inside the slice.
        m_hi = min(
            int(self.lm_count.max()) + len(observations) + 1, cfg.max_landmarks
        )
        self._m_hi = max(m_hi, 1)
        car_dx = self.lm_xy[:, : self._m_hi, 0] - self.pose[:, 0, None]
        car_dy = self.lm_xy[:, : self._m_hi, 1] - self.pose[:, 1, None]
        in_radius = car_dx**2 + car_dy**2 <= cfg.match_radius**2
        self._valid = self.lm_active[:, : self._m_hi] & in_radius

        n_matched = n_new = n_far = 0
        for obs in observations:
            rng_range = float(np.linalg.norm(obs.position))
            if rng_range > cfg.sensor_range:
                self.log_w += math.log(cfg.w_or)
                n_far += 1
                continue
            matched, created = self._process_observation(obs)
            n_matched += matched
            n_new += created

        self._penalize_unseen()

        if gnss_pose is not None:
            self._apply_pose_weight(gnss_pose, gnss_sigmas)

        # normalize in log space
        self.log_w -= self.log_w.max()
        w = np.exp(self.log_w)
        w_sum = w.sum()
        if not np.isfinite(w_sum) or w_sum <= 0.0:
            raise SlamError("particle weights degenerated")
        w /= w_sum
        self.log_w = np.log(np.maximum(w, 1e-300))
        n_eff = float(1.0 / np.sum(w * w))

        resampled = False
        if n_eff < cfg.resample_ratio * cfg.n_particles:
            self._resample(w)
            resampled = True
            self.n_resamples += 1

        return SlamDiagnostics(
            n_eff=n_eff,
            resampled=resampled,
            map_size=int(self.lm_active[self._best_index()].sum()),
            n_matched=n_matched,
            n_new=n_new,
        )

    # -- internals -----------------------------------------------------------

    def _process_observation(self, obs) -> tuple[int, int]:
        cfg = self.cfg
        n = cfg.n_particles
        threshold = _new_threshold(cfg, self.mode)
        u = self.rng.gen.uniform(size=n)
        zx, zy, ra, rb, rc, is_match, choice, w_sel = _assoc_kernel(
            self.pose,
            self.lm_xy,
            self.lm_cov,
            self._valid,
            self._m_hi,
            float(obs.position[0]),
            float(obs.position[1]),
            float(obs.cov[0, 0]),
            float(obs.cov[0, 1]),
            float(obs.cov[1, 1]),
            cfg.candidate_ratio,
            threshold,
            u,
        )

        rows = np.flatnonzero(is_match)
        if rows.size:
            cols = choice[rows]
            self.log_w[rows] += np.log(w_sel[rows])
            self._matched[rows, cols] = True
            if self.mode is SlamMode.MAPPING:
                self._kalman_update(
                    rows, cols, zx[rows], zy[rows],
                    ra[rows], rb[rows], rc[rows],
                )
                self.lm_color[rows, cols] += np.asarray(
                    _obs_scores(obs), dtype=np.float32
                )

        new_rows = np.flatnonzero(~is_match)
        created = 0
        if new_rows.size:
            self.log_w[new_rows] += math.log(threshold)
            if self.mode is SlamMode.MAPPING:
                created = self._insert(new_rows, zx, zy, ra, rb, rc, obs)
                self.maps_identical = False
        return int(rows.size), created

    def _kalman_update(self, rows, cols, zx, zy, ra, rb, rc) -> None:
        Pa = self.lm_cov[rows, cols, 0]
        Pb = self.lm_cov[rows, cols, 1]
        Pc = self.lm_cov[rows, cols, 2]
        Sa, Sb, Sc = Pa + ra, Pb + rb, Pc + rc
        det = Sa * Sc - Sb * Sb
        # K = P S^-1, all 2x2 and symmetric, expanded by hand
        K00 = (Pa * Sc - Pb * Sb) / det
        K01 = (Pb * Sa - Pa * Sb) / det
        K10 = (Pb * Sc - Pc * Sb) / det
        K11 = (Pc * Sa - Pb * Sb) / det
        ex = zx - self.lm_xy[rows, cols, 0]
        ey = zy - self.lm_xy[rows, cols, 1]
        self.lm_xy[rows, cols, 0] += K00 * ex + K01 * ey
        self.lm_xy[rows, cols, 1] += K10 * ex + K11 * ey
        # P <- (I - K) P, symmetrized
        na = (1.0 - K00) * Pa - K01 * Pb
        nb1 = (1.0 - K00) * Pb - K01 * Pc
        nb2 = -K10 * Pa + (1.0 - K11) * Pb
        nc = -K10 * Pb + (1.0 - K11) * Pc
        self.lm_cov[rows, cols, 0] = na
        self.lm_cov[rows, cols, 1] = 0.5 * (nb1 + nb2)
        self.lm_cov[rows, cols, 2] = nc
        self.lm_seen[rows, cols] += 1
        if rows.size:
            self.maps_identical = False

    def _insert(self, rows, zx, zy, ra, rb, rc, obs) -> int:
        cfg = self.cfg
        slots = self.lm_count[rows]
        ok = slots < cfg.max_landmarks
        if not np.all(ok) and not self._map_full_reported:
            self._map_full_reported = True
        rows = rows[ok]
        slots = slots[ok]
        if rows.size == 0:
            return 0
        extra = cfg.new_landmark_sigma**2
        self.lm_xy[rows, slots, 0] = zx[rows]
        self.lm_xy[rows, slots, 1] = zy[rows]
        self.lm_cov[rows, slots, 0] = ra[rows] + extra
        self.lm_cov[rows, slots, 1] = rb[rows]
        self.lm_cov[rows, slots, 2] = rc[rows] + extra
        self.lm_seen[rows, slots] = 1
        self.lm_missed[rows, slots] = 0
        self.lm_color[rows, slots] = np.asarray(_obs_scores(obs), dtype=np.float32)
        self.lm_active[rows, slots] = True
        self._matched[rows, slots] = True  # fresh cones are not "unseen"
        self._valid[rows, slots] = True  # headroom guarantees slots < m_hi
        self.lm_count[rows] = slots + 1
        return int(rows.size)

    def _penalize_unseen(self) -> None:
        cfg = self.cfg
        m = self._m_hi
        px = self.pose[:, 0][:, None]
        py = self.pose[:, 1][:, None]
        psi = self.pose[:, 2][:, None]
        active = self.lm_active[:, :m]
        dx = self.lm_xy[:, :m, 0] - px
        dy = self.lm_xy[:, :m, 1] - py
        r2 = dx * dx + dy * dy
        max_r = cfg.sensor_range * cfg.visibility_margin
        bearing = np.arctan2(dy, dx) - psi
        bearing = (bearing + math.pi) % (2 * math.pi) - math.pi
        half_fov = math.radians(cfg.sensor_fov_deg) / 2.0 * cfg.visibility_margin
        expected = (
            active
            & (r2 <= max_r * max_r)
            & (np.abs(bearing) <= half_fov)
        )
        unseen = expected & ~self._matched[:, :m]
        counts = unseen.sum(axis=1)
        self.log_w += counts * math.log(cfg.w_no)
        if self.mode is SlamMode.MAPPING:
            self.lm_missed[:, :m][unseen] += 1
            seen = self.lm_seen[:, :m]
            missed = self.lm_missed[:, :m]
            quality = seen / np.maximum(seen + missed, 1)
            prune = active & (quality < cfg.quality_min)
            if prune.any():
                self.lm_active[:, :m][prune] = False
                self.maps_identical = False

    def _apply_pose_weight(self, gnss_pose: Pose2, sigmas) -> None:
        cfg = self.cfg
        if sigmas is None:
            sigmas = np.array(
                [cfg.gnss_xy_sigma_floor, cfg.gnss_xy_sigma_floor, cfg.gnss_psi_sigma_floor]
            )
        sx = max(float(sigmas[0]), cfg.gnss_xy_sigma_floor)
        sy = max(float(sigmas[1]), cfg.gnss_xy_sigma_floor)
        sp = max(float(sigmas[2]), cfg.gnss_psi_sigma_floor)
        ex = self.pose[:, 0] - gnss_pose.x
        ey = self.pose[:, 1] - gnss_pose.y
        ep = wrap_angle_array(self.pose[:, 2] - gnss_pose.psi)
        self.log_w += (
            -0.5 * (ex / sx) ** 2
            - 0.5 * (ey / sy) ** 2
            - 0.5 * (ep / sp) ** 2
            - math.log(sx * sy * sp)
            - 1.5 * LOG_2PI
        )

    def _resample(self, weights: np.ndarray) -> None:
        cfg = self.cfg
        n = cfg.n_particles
        offset = float(self.rng.gen.uniform(0.0, 1.0 / n))
        idx = systematic_resample_indices(weights, offset)
        self.pose = self.pose[idx].copy()
        if self.track_width is not None:
            self.track_width = self.track_width[idx].copy()
        if not self.maps_identical:
            self.lm_xy = self.lm_xy[idx].copy()
            self.lm_cov = self.lm_cov[idx].copy()
            self.lm_seen = self.lm_seen[idx].copy()
            self.lm_missed = self.lm_missed[idx].copy()
            self.lm_color = self.lm_color[idx].copy()
            self.lm_active = self.lm_active[idx].copy()
            self.lm_count = self.lm_count[idx].copy()
        self.log_w[:] = -math.log(n)

        # exploration: scatter a fixed fraction of survivors
        k = int(round(cfg.explore_frac * n))
        if k:
            rows = self.rng.gen.choice(n, size=k, replace=False)
            self.pose[rows, 0] += self.rng.gen.normal(0, cfg.explore_xy_sigma, k)
            self.pose[rows, 1] += self.rng.gen.normal(0, cfg.explore_xy_sigma, k)
            self.pose[rows, 2] = wrap_angle_array(
                self.pose[rows, 2]
                + self.rng.gen.normal(0, cfg.explore_psi_sigma, k)
            )

    # -- outputs ------------------------------------------------------------

    def _weights(self) -> np.ndarray:
        w = np.exp(self.log_w - self.log_w.max())
        return w / w.sum()

    def _best_index(self) -> int:
        return int(np.argmax(self.log_w))

    def estimate(self) -> Pose2:
        """Weighted mean pose; heading averaged on the circle."""
        w = self._weights()
        x = float(w @ self.pose[:, 0])
        y = float(w @ self.pose[:, 1])
        psi = math.atan2(
            float(w @ np.sin(self.pose[:, 2])), float(w @ np.cos(self.pose[:, 2]))
        )
        return Pose2(x, y, psi)

    def width_estimate(self) -> float | None:
        """Weighted mean of per-particle track widths (Acceleration)."""
        if self.track_width is None:
            return None
        return float(self._weights() @ self.track_width)

    def map_snapshot(self) -> list[MapCone]:
        """Map of the highest-weight particle."""
        b = self._best_index()
        out = []
        for i in np.flatnonzero(self.lm_active[b]):
            a, bb, c = self.lm_cov[b, i]
            seen = int(self.lm_seen[b, i])
            missed = int(self.lm_missed[b, i])
            out.append(
                MapCone(
                    position=self.lm_xy[b, i].copy(),
                    cov=np.array([[a, bb], [bb, c]]),
                    color=dominant_color(self.lm_color[b, i]),
                    quality=seen / max(seen + missed, 1),
                )
            )
        return out

    def freeze_map(self) -> None:
        """Clone the best map into every particle and stop updating it."""
        b = self._best_index()
        self.lm_xy[:] = self.lm_xy[b]
        self.lm_cov[:] = self.lm_cov[b]
        self.lm_seen[:] = self.lm_seen[b]
        self.lm_missed[:] = self.lm_missed[b]
        self.lm_color[:] = self.lm_color[b]
        self.lm_active[:] = self.lm_active[b]
        self.lm_count[:] = self.lm_count[b]
        self.maps_identical = True
        self.mode = SlamMode.LOCALIZATION


def _obs_scores(obs) -> np.ndarray:
    scores = getattr(obs, "color_scores", None)
    if scores is not None:
        return np.asarray(scores, dtype=float)
    return color_scores(obs.color, getattr(obs, "color_confidence", 1.0))
