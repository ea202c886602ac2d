"""Ground plane, depth clustering, cone triangulation, and dedup."""

from __future__ import annotations

import math

import numpy as np
import pytest

from racestack.core import ConeColor, RngStream
from racestack.perception import (
    BehindCamera,
    CameraModel,
    ConeDetection,
    ConeKeypointModel,
    ConeObservation,
    DegenerateInput,
    NoConsensus,
    NoConvergence,
    camera_to_vehicle,
    cluster_depth,
    cone_cost,
    cone_cost_gradient,
    deduplicate,
    process_detections,
    ransac_ground_plane,
    solve_cone_position,
)

CAMERA = CameraModel(fx=900.0, fy=900.0, cx=640.0, cy=360.0)
MODEL = ConeKeypointModel.small_cone()


def _make_detection(
    p_true,
    camera=CAMERA,
    model=MODEL,
    px_sigma=0.0,
    depth_sigma=0.0,
    rng=None,
    color=ConeColor.BLUE,
):
    p_true = np.asarray(p_true, dtype=float)
    kps = np.array([camera.project(p_true + o) for o in model.offsets])
    n = len(kps)
    sigma = max(px_sigma, 0.5)
    if rng is not None and px_sigma > 0:
        kps = kps + rng.normal(0.0, px_sigma, kps.shape)
    depth = p_true[0]
    if rng is not None and depth_sigma > 0:
        samples = depth + rng.normal(0.0, depth_sigma, 12)
    else:
        samples = np.full(12, depth)
    return ConeDetection(
        keypoints=kps,
        keypoint_cov=np.tile(np.eye(2) * sigma**2, (n, 1, 1)),
        depth_samples=samples,
        midpoint_depth=float(samples[0]),
        color=color,
    )


# --- RANSAC ground plane ----------------------------------------------------


def test_ransac_recovers_tilted_plane():
    rng = np.random.default_rng(5)
    # z = 0.03 x + 0.02 y - 0.4, with 30% gross outliers mixed in.
    n_in, n_out = 210, 90
    xy = rng.uniform(-10, 10, (n_in, 2))
    z = 0.03 * xy[:, 0] + 0.02 * xy[:, 1] - 0.4 + rng.normal(0, 0.01, n_in)
    inliers = np.column_stack([xy, z])
    outliers = rng.uniform(-10, 10, (n_out, 3))
    pts = np.vstack([inliers, outliers])
    rng.shuffle(pts)

    plane = ransac_ground_plane(pts, RngStream(77), iterations=200, tol=0.05)
    true_normal = np.array([-0.03, -0.02, 1.0])
    true_normal /= np.linalg.norm(true_normal)
    angle = math.degrees(
        math.acos(np.clip(abs(plane.normal @ true_normal), -1, 1))
    )
    assert angle < 0.5
    assert plane.normal[2] > 0


def test_ransac_refits_on_inliers():
    # With no outliers the result must match a direct least-squares fit,
    # i.e. better than any single 3-point hypothesis.
    rng = np.random.default_rng(8)
    xy = rng.uniform(-5, 5, (120, 2))
    z = 0.01 * xy[:, 0] + 0.25 + rng.normal(0, 0.004, 120)
    pts = np.column_stack([xy, z])
    plane = ransac_ground_plane(pts, RngStream(3), iterations=50, tol=0.05)
    resid = np.abs(pts @ plane.normal + plane.offset)
    assert resid.mean() < 0.005


def test_ransac_no_consensus():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-10, 10, (300, 3))  # volumetric noise, no real plane
    with pytest.raises(NoConsensus):
        ransac_ground_plane(pts, RngStream(4), iterations=60, tol=0.01)


def test_ransac_degenerate_collinear():
    t = np.linspace(0, 1, 50)
    pts = np.column_stack([t, 2 * t, 3 * t])
    with pytest.raises(DegenerateInput):
        ransac_ground_plane(pts, RngStream(5), iterations=30, tol=0.05)


def test_ransac_too_few_points():
    with pytest.raises(DegenerateInput):
        ransac_ground_plane(np.zeros((2, 3)), RngStream(6))


# --- depth clustering ---------------------------------------------------------


def test_cluster_depth_picks_anchor_cluster():
    samples = np.array([10.0, 10.1, 9.9, 25.0, 25.1])
    assert cluster_depth(samples, anchor=10.05) == pytest.approx(10.0)
    # Anchored in the background cluster instead: mean of {25.0, 25.1}.
    assert cluster_depth(samples, anchor=25.0) == pytest.approx(25.05)


def test_cluster_depth_single_cluster():
    samples = np.array([4.0, 4.2, 4.4, 4.1])
    assert cluster_depth(samples, anchor=4.2) == pytest.approx(4.175)


def test_cluster_depth_gap_boundary():
    # Exactly 0.5 m apart chains into one cluster; just over splits it.
    assert cluster_depth(np.array([1.0, 1.5]), 1.0) == pytest.approx(1.25)
    assert cluster_depth(np.array([1.0, 1.51]), 1.0) == pytest.approx(1.0)


def test_cluster_depth_empty_raises():
    with pytest.raises(DegenerateInput):
        cluster_depth(np.array([]), 1.0)


# --- cone position solve -------------------------------------------------------


def test_noise_free_round_trip():
    p_true = np.array([10.0, 1.5, 0.0])
    det = _make_detection(p_true)
    est = solve_cone_position(det, MODEL, CAMERA)
    np.testing.assert_allclose(est.position, p_true, atol=1e-6)


def test_round_trip_various_positions():
    rng = np.random.default_rng(21)
    for _ in range(20):
        p_true = np.array(
            [rng.uniform(4, 18), rng.uniform(-6, 6), rng.uniform(-0.1, 0.1)]
        )
        det = _make_detection(p_true)
        est = solve_cone_position(det, MODEL, CAMERA)
        np.testing.assert_allclose(est.position, p_true, atol=1e-5)


def test_depth_term_weight_falls_off_with_range():
    # At x = 10 m the depth residual carries weight lam1/x^2 = 0.01, so a
    # 1 m depth mismatch must contribute 0.01 to the cost.
    p = np.array([10.0, 0.0, 0.0])
    det = _make_detection(p)
    with_mismatch = cone_cost(p, det, MODEL, CAMERA, depth=9.0, lam1=1.0, lam2=10.0)
    no_mismatch = cone_cost(p, det, MODEL, CAMERA, depth=10.0, lam1=1.0, lam2=10.0)
    assert with_mismatch - no_mismatch == pytest.approx(0.01, rel=1e-9)


def test_ground_weight_pulls_z_down_monotonically():
    # Keypoints say the cone floats 0.3 m above ground; growing lam2 must
    # pull the optimum height toward zero, strictly monotonically.
    p_true = np.array([8.0, 1.0, 0.3])
    det = _make_detection(p_true)
    heights = []
    for lam2 in (0.1, 1.0, 10.0, 100.0, 1000.0):
        est = solve_cone_position(det, MODEL, CAMERA, lam1=1.0, lam2=lam2)
        heights.append(abs(est.position[2]))
    assert all(a > b for a, b in zip(heights, heights[1:])), heights


def test_cost_gradient_matches_finite_differences():
    rng = np.random.default_rng(33)
    for _ in range(50):
        p_true = np.array(
            [rng.uniform(5, 15), rng.uniform(-4, 4), rng.uniform(-0.2, 0.2)]
        )
        det = _make_detection(p_true, px_sigma=2.0, rng=rng)
        p = p_true + rng.normal(0, 0.2, 3)
        p[0] = max(p[0], 1.0)
        depth = p_true[0] + rng.normal(0, 0.3)
        g = cone_cost_gradient(p, det, MODEL, CAMERA, depth, 1.0, 10.0)
        g_fd = np.zeros(3)
        eps = 1e-6
        for j in range(3):
            dp = np.zeros(3)
            dp[j] = eps
            hi = cone_cost(p + dp, det, MODEL, CAMERA, depth, 1.0, 10.0)
            lo = cone_cost(p - dp, det, MODEL, CAMERA, depth, 1.0, 10.0)
            g_fd[j] = (hi - lo) / (2 * eps)
        denom = np.maximum(np.abs(g_fd), 1e-3)
        assert np.max(np.abs(g - g_fd) / denom) < 1e-5


def test_covariance_is_statistically_consistent():
    # Normalized squared error against the reported covariance should
    # average near 1 when the pixel noise matches the stated covariance.
    rng = np.random.default_rng(100)
    p_true = np.array([9.0, -1.0, 0.05])
    ratios = []
    for _ in range(200):
        det = _make_detection(p_true, px_sigma=1.0, depth_sigma=0.15, rng=rng)
        # Depth prior weight lam1 about matches a 0.15 m sigma at 9 m
        # via lam1/x^2 ~= 1/sigma^2 scaled; keep priors soft instead.
        est = solve_cone_position(det, MODEL, CAMERA, lam1=0.0, lam2=0.0)
        e = est.position - p_true
        ratios.append(float(e @ np.linalg.solve(est.cov, e)) / 3.0)
    avg = float(np.mean(ratios))
    assert 0.5 < avg < 2.0, avg


def test_behind_camera_raises():
    # A dominant depth prior of 2 cm drags the optimum into the image
    # plane; the solver must refuse rather than return a pinned iterate.
    det = _make_detection(np.array([6.0, 0.0, 0.0]))
    with pytest.raises(BehindCamera):
        solve_cone_position(det, MODEL, CAMERA, depth=0.02, lam1=1e8)


def test_no_convergence_raises():
    det = _make_detection(np.array([12.0, 2.0, 0.0]))
    with pytest.raises(NoConvergence):
        solve_cone_position(
            det,
            MODEL,
            CAMERA,
            x0=np.array([3.0, -3.0, 1.0]),
            max_iterations=1,
        )


# --- dedup and pipeline ---------------------------------------------------------


def _obs(x, y, trace, color=ConeColor.BLUE):
    return ConeObservation(
        position=np.array([x, y], dtype=float),
        cov=np.eye(2) * (trace / 2.0),
        color=color,
    )


def test_deduplicate_same_ray():
    a = _obs(10.0, 1.0, 0.02)
    b = _obs(10.2, 1.02, 0.08)  # same bearing within 2 degrees
    out = deduplicate([a, b])
    assert len(out) == 1
    assert out[0] is a  # lower covariance survives


def test_deduplicate_color_gates_ray_merge():
    a = _obs(10.0, 1.0, 0.02, ConeColor.BLUE)
    b = _obs(14.0, 1.4, 0.08, ConeColor.YELLOW)  # same ray, farther, other color
    assert len(deduplicate([a, b])) == 2


def test_deduplicate_min_separation_is_unconditional():
    a = _obs(5.0, 2.0, 0.02, ConeColor.BLUE)
    b = _obs(5.0, 2.2, 0.08, ConeColor.YELLOW)
    out = deduplicate([a, b])
    assert len(out) == 1
    for i, x in enumerate(out):
        for y in out[i + 1 :]:
            assert np.linalg.norm(x.position - y.position) >= 0.3


def test_deduplicate_keeps_distinct_cones():
    out = deduplicate([_obs(5, 2, 0.02), _obs(5, -2, 0.02), _obs(9, 2, 0.03)])
    assert len(out) == 3


def test_pipeline_merges_overlapping_cameras():
    cameras = {
        0: CameraModel(900, 900, 640, 360, position=np.array([1.0, 0.2, 0.0])),
        1: CameraModel(900, 900, 640, 360, position=np.array([1.0, -0.2, 0.0])),
    }
    cone_vehicle = np.array([9.0, 1.0, 0.0])
    dets = []
    for cam_id, cam in cameras.items():
        p_cam = cone_vehicle - cam.position
        det = _make_detection(p_cam, camera=cam)
        det.camera_id = cam_id
        dets.append(det)
    out = process_detections(dets, cameras)
    assert len(out) == 1
    np.testing.assert_allclose(out[0].position, cone_vehicle[:2], atol=1e-4)
    assert out[0].color is ConeColor.BLUE


def test_pipeline_drops_unsolvable_detection():
    cameras = {0: CAMERA}
    good = _make_detection(np.array([8.0, 0.5, 0.0]))
    bad = _make_detection(np.array([8.0, -2.0, 0.0]))
    bad.depth_samples = np.array([])  # no stereo support
    out = process_detections([good, bad], cameras)
    assert len(out) == 1
