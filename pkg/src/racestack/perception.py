"""Geometric back end of the cone detector.

Detections arrive as pixel keypoints plus a patch of stereo depth samples.
This module turns them into metric cone positions with covariance:

* RANSAC plane fit over the stereo point cloud isolates the ground.
* Single-linkage clustering over the depth samples in a bounding box picks
  a robust depth for the cone (stray foreground/background pixels form
  their own clusters and are ignored).
* A Levenberg-Marquardt solve refines the cone position by minimizing
  keypoint reprojection error together with two geometric priors: the
  clustered depth (weight lam1 / x^2) and proximity to the ground plane
  (weight lam2 / (x^2 + y^2)). Both weights fall off with distance, so
  close cones trust the priors and far cones trust the pixels less.
* Observations of the same physical cone from overlapping cameras are
  merged by ray angle and color compatibility.

All solver math works in a camera-aligned ground frame: origin at the
optical center, x along the view direction projected into the ground
plane, y left, z up along the ground normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from racestack.core import ConeColor, RngStream, rotation2


class PerceptionError(Exception):
    pass


class DegenerateInput(PerceptionError):
    """Input cannot support the requested fit (collinear, empty, ...)."""


class NoConsensus(PerceptionError):
    """RANSAC found no model explaining the required inlier fraction."""


class NoConvergence(PerceptionError):
    """Iterative solve did not meet its tolerance within the budget."""


class BehindCamera(PerceptionError):
    """Optimized cone position ended up behind the image plane."""


# --- camera and detection records ------------------------------------------


@dataclass(slots=True)
class CameraModel:
    """Pinhole intrinsics plus the mount pose in the vehicle frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    hfov_deg: float = 85.0
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0  # mount yaw relative to vehicle x, radians

    def project(self, p: np.ndarray) -> np.ndarray:
        """Project a camera-aligned ground-frame point to pixels."""
        x, y, z = p
        if x <= 0.0:
            raise BehindCamera(f"x={x:.3f}")
        return np.array([self.cx - self.fx * y / x, self.cy - self.fy * z / x])

    def projection_jacobian(self, p: np.ndarray) -> np.ndarray:
        x, y, z = p
        return np.array(
            [
                [self.fx * y / (x * x), -self.fx / x, 0.0],
                [self.fy * z / (x * x), 0.0, -self.fy / x],
            ]
        )

    def back_project(self, pixel: np.ndarray, depth: float) -> np.ndarray:
        """Ground-frame point at ``depth`` along x for a pixel."""
        u, v = pixel
        return np.array(
            [depth, -(u - self.cx) / self.fx * depth, -(v - self.cy) / self.fy * depth]
        )


@dataclass(slots=True)
class ConeKeypointModel:
    """Known keypoint offsets from the cone base, meters.

    Offsets are applied in the camera-aligned ground frame without a view
    rotation; the lateral extent of a cone is small against the ranges at
    which it is observed, so the induced error is below sensor noise.
    """

    offsets: np.ndarray

    @classmethod
    def small_cone(cls) -> "ConeKeypointModel":
        # 228 x 228 x 325 mm track cone: tip, two strip edges, two base corners
        return cls(
            np.array(
                [
                    [0.0, 0.0, 0.305],
                    [0.0, 0.055, 0.22],
                    [0.0, -0.055, 0.22],
                    [0.0, 0.09, 0.10],
                    [0.0, -0.09, 0.10],
                    [0.0, 0.114, 0.0],
                    [0.0, -0.114, 0.0],
                ]
            )
        )


@dataclass(slots=True)
class ConeDetection:
    """One detector hit in one camera."""

    keypoints: np.ndarray  # (K, 2) pixel coordinates
    keypoint_cov: np.ndarray  # (K, 2, 2)
    depth_samples: np.ndarray  # stereo depths inside the box, meters
    midpoint_depth: float  # depth sample at the box center
    color: ConeColor
    color_confidence: float = 1.0
    camera_id: int = 0


@dataclass(slots=True)
class ConeEstimate:
    position: np.ndarray  # (3,) camera-aligned ground frame
    cov: np.ndarray  # (3, 3)
    cost: float
    iterations: int


@dataclass(slots=True)
class ConeObservation:
    """Vehicle-frame 2D cone observation handed to SLAM."""

    position: np.ndarray  # (2,)
    cov: np.ndarray  # (2, 2)
    color: ConeColor
    color_confidence: float = 1.0


# --- ground plane ----------------------------------------------------------


@dataclass(slots=True)
class GroundPlane:
    """Plane n . p + d = 0 with unit normal oriented +z."""

    normal: np.ndarray
    offset: float

    def height(self, p: np.ndarray) -> float:
        return float(self.normal @ p + self.offset)


def _fit_plane_lsq(points: np.ndarray) -> GroundPlane:
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid, full_matrices=False)
    if s[-2] < 1e-9:
        raise DegenerateInput("points do not span a plane")
    normal = vt[-1]
    if normal[2] < 0:
        normal = -normal
    return GroundPlane(normal, float(-normal @ centroid))


def ransac_ground_plane(
    points: np.ndarray,
    rng: RngStream,
    iterations: int = 100,
    tol: float = 0.05,
    min_inlier_ratio: float = 0.2,
) -> GroundPlane:
    """Robust plane fit; refits to the best consensus set before returning."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateInput("need at least 3 points of dimension 3")

    best_inliers: np.ndarray | None = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.gen.choice(len(pts), size=3, replace=False)
        a, b, c = pts[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue  # collinear sample
        normal = normal / norm
        dist = np.abs((pts - a) @ normal)
        inliers = dist < tol
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None:
        raise DegenerateInput("all sampled triples were collinear")
    if best_count / len(pts) < min_inlier_ratio:
        raise NoConsensus(
            f"best consensus {best_count}/{len(pts)} below "
            f"{min_inlier_ratio:.0%}"
        )
    return _fit_plane_lsq(pts[best_inliers])


# --- depth clustering --------------------------------------------------------


def cluster_depth(
    samples: np.ndarray, anchor: float, gap: float = 0.5
) -> float:
    """Mean of the single-linkage depth cluster containing ``anchor``.

    Samples are chained while consecutive sorted values are within ``gap``
    of each other; the cluster holding the sample nearest the anchor (the
    box-midpoint depth) wins.
    """
    s = np.sort(np.asarray(samples, dtype=float))
    if s.size == 0:
        raise DegenerateInput("no depth samples")
    breaks = np.flatnonzero(np.diff(s) > gap)
    bounds = np.concatenate(([0], breaks + 1, [len(s)]))
    anchor_pos = int(np.argmin(np.abs(s - anchor)))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if lo <= anchor_pos < hi:
            return float(s[lo:hi].mean())
    raise AssertionError("anchor fell outside all clusters")  # pragma: no cover


# --- cone position solve -----------------------------------------------------

_X_MIN = 0.05  # meters; forbid solutions at or behind the image plane


def _cone_residuals(
    p: np.ndarray,
    detection: ConeDetection,
    model: ConeKeypointModel,
    camera: CameraModel,
    depth: float,
    lam1: float,
    lam2: float,
    with_jacobian: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    x, y, z = p
    n_kp = len(model.offsets)
    m = 2 * n_kp + 2
    r = np.zeros(m)
    J = np.zeros((m, 3)) if with_jacobian else None

    for i, offset in enumerate(model.offsets):
        q = p + offset
        if q[0] <= 0.0:
            raise BehindCamera(f"keypoint x={q[0]:.3f}")
        pred = camera.project(q)
        # Whiten by the keypoint covariance so residual units are sigmas.
        L = np.linalg.cholesky(detection.keypoint_cov[i])
        resid = np.linalg.solve(L, pred - detection.keypoints[i])
        r[2 * i : 2 * i + 2] = resid
        if with_jacobian:
            J[2 * i : 2 * i + 2] = np.linalg.solve(
                L, camera.projection_jacobian(q)
            )

    # Depth prior with 1/x^2 falloff: residual sqrt(lam1) * (x - d) / x.
    sl1 = math.sqrt(lam1)
    r[-2] = sl1 * (x - depth) / x
    # Ground prior with 1/(x^2+y^2) falloff: residual sqrt(lam2) * z / rho.
    rho = math.hypot(x, y)
    sl2 = math.sqrt(lam2)
    r[-1] = sl2 * z / rho
    if with_jacobian:
        J[-2, 0] = sl1 * depth / (x * x)
        J[-1, 0] = -sl2 * z * x / rho**3
        J[-1, 1] = -sl2 * z * y / rho**3
        J[-1, 2] = sl2 / rho
    return r, J


def cone_cost(
    p: np.ndarray,
    detection: ConeDetection,
    model: ConeKeypointModel,
    camera: CameraModel,
    depth: float,
    lam1: float = 1.0,
    lam2: float = 10.0,
) -> float:
    """Total weighted squared error at a candidate position."""
    r, _ = _cone_residuals(p, detection, model, camera, depth, lam1, lam2, False)
    return float(r @ r)


def cone_cost_gradient(
    p: np.ndarray,
    detection: ConeDetection,
    model: ConeKeypointModel,
    camera: CameraModel,
    depth: float,
    lam1: float = 1.0,
    lam2: float = 10.0,
) -> np.ndarray:
    r, J = _cone_residuals(p, detection, model, camera, depth, lam1, lam2, True)
    return 2.0 * J.T @ r


def solve_cone_position(
    detection: ConeDetection,
    model: ConeKeypointModel,
    camera: CameraModel,
    depth: float | None = None,
    lam1: float = 1.0,
    lam2: float = 10.0,
    x0: np.ndarray | None = None,
    max_iterations: int = 50,
    step_tol: float = 1e-8,
) -> ConeEstimate:
    """Levenberg-Marquardt refinement of a single cone position."""
    if depth is None:
        depth = cluster_depth(detection.depth_samples, detection.midpoint_depth)
    if x0 is None:
        mid = detection.keypoints.mean(axis=0)
        x0 = camera.back_project(mid, max(depth, 4 * _X_MIN))
    p = np.asarray(x0, dtype=float).copy()
    p[0] = max(p[0], 2 * _X_MIN)

    lam_damp = 1e-3
    r, J = _cone_residuals(p, detection, model, camera, depth, lam1, lam2, True)
    cost = float(r @ r)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        JtJ = J.T @ J
        g = J.T @ r
        step = None
        for _ in range(20):
            try:
                step = np.linalg.solve(JtJ + lam_damp * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam_damp *= 10.0
                continue
            candidate = p + step
            if candidate[0] <= _X_MIN:
                # Keep the iterate in front of the camera; shrink the step.
                lam_damp *= 10.0
                continue
            try:
                r_new, J_new = _cone_residuals(
                    candidate, detection, model, camera, depth, lam1, lam2, True
                )
            except BehindCamera:
                lam_damp *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                p, r, J, cost = candidate, r_new, J_new, cost_new
                lam_damp = max(lam_damp / 10.0, 1e-12)
                break
            lam_damp *= 10.0
        else:
            # No downhill step found at any damping: treat as converged if
            # the last proposal was already negligible.
            if step is not None and np.linalg.norm(step) < step_tol:
                converged = True
            break
        if np.linalg.norm(step) < step_tol:
            converged = True
            break

    # An iterate pinned against the x > 0 boundary means the optimum is at
    # or behind the image plane; report that before a convergence failure.
    if p[0] <= 5 * _X_MIN:
        raise BehindCamera(f"optimum pinned at x={p[0]:.3f}")
    if not converged and iterations >= max_iterations:
        raise NoConvergence(f"no convergence in {max_iterations} iterations")
    JtJ = J.T @ J
    try:
        cov = np.linalg.inv(JtJ)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInput("singular normal equations at optimum") from exc
    return ConeEstimate(position=p, cov=cov, cost=cost, iterations=iterations)


# --- frame hand-off and deduplication ----------------------------------------


def camera_to_vehicle(
    estimate: ConeEstimate, camera: CameraModel
) -> ConeObservation:
    """Flatten a solved cone into a vehicle-frame 2D observation."""
    R = rotation2(camera.yaw)
    pos = R @ estimate.position[:2] + camera.position[:2]
    cov = R @ estimate.cov[:2, :2] @ R.T
    return ConeObservation(position=pos, cov=cov, color=ConeColor.UNKNOWN)


def _color_compatible(a: ConeColor, b: ConeColor) -> bool:
    return a == b or ConeColor.UNKNOWN in (a, b)


def deduplicate(
    observations: list[ConeObservation],
    ray_angle_thresh: float = math.radians(2.0),
    min_separation: float = 0.3,
) -> list[ConeObservation]:
    """Merge duplicate cones seen by overlapping cameras.

    Two passes. First, observations on (nearly) the same ray from the
    vehicle with compatible colors are duplicates of one physical cone;
    the one with the smaller covariance trace survives. Second, a hard
    floor: no two outputs may sit within ``min_separation`` of each other,
    color notwithstanding, because two cones cannot physically overlap.
    Sorting by covariance trace up front makes "first kept wins" keep the
    best estimate in both passes.
    """
    ordered = sorted(observations, key=lambda o: float(np.trace(o.cov)))

    same_ray: list[ConeObservation] = []
    for obs in ordered:
        bearing = math.atan2(obs.position[1], obs.position[0])
        duplicate = any(
            abs(
                math.remainder(
                    bearing - math.atan2(k.position[1], k.position[0]),
                    2.0 * math.pi,
                )
            )
            < ray_angle_thresh
            and _color_compatible(obs.color, k.color)
            for k in same_ray
        )
        if not duplicate:
            same_ray.append(obs)

    out: list[ConeObservation] = []
    for obs in same_ray:
        if all(
            np.linalg.norm(obs.position - k.position) >= min_separation
            for k in out
        ):
            out.append(obs)
    return out


def process_detections(
    detections: list[ConeDetection],
    cameras: dict[int, CameraModel],
    model: ConeKeypointModel | None = None,
    lam1: float = 1.0,
    lam2: float = 10.0,
) -> list[ConeObservation]:
    """Full geometric pipeline: depth, position solve, hand-off, dedup.

    Detections whose solve fails (no depth consensus, behind camera, no
    convergence) are dropped; one bad detection must not kill the tick.
    """
    model = model or ConeKeypointModel.small_cone()
    out: list[ConeObservation] = []
    for det in detections:
        try:
            est = solve_cone_position(
                det, model, cameras[det.camera_id], lam1=lam1, lam2=lam2
            )
        except PerceptionError:
            continue
        obs = camera_to_vehicle(est, cameras[det.camera_id])
        obs.color = det.color
        obs.color_confidence = det.color_confidence
        out.append(obs)
    return deduplicate(out)
