"""Gate construction, gate scoring, beam search vs exhaustive baseline."""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest

from racestack.centerline import (
    CenterlinePath,
    Gate,
    GateCostWeights,
    NoPath,
    UnknownMission,
    build_gates,
    detect_centerline,
    gate_cost,
    hardcoded_centerline,
)
from racestack.core import ConeColor, Pose2


def _cone(x, y, color=ConeColor.BLUE):
    return SimpleNamespace(position=np.array([x, y], dtype=float), color=color)


def _gate(pl, pr, cl=ConeColor.BLUE, cr=ConeColor.YELLOW):
    return Gate(0, 1, tuple(pl), tuple(pr), cl, cr)


# --- gate construction ---------------------------------------------------------


def test_build_gates_single_pair():
    gates = build_gates([_cone(0, 1.5), _cone(0, -1.5, ConeColor.YELLOW)])
    assert len(gates) == 1
    assert gates[0].center == pytest.approx((0.0, 0.0))
    assert gates[0].width == pytest.approx(3.0)


def test_build_gates_rejects_distant_pair():
    assert build_gates([_cone(0, 0), _cone(10, 0)]) == []


def test_build_gates_rejects_touching_pair():
    assert build_gates([_cone(0, 0), _cone(1.4, 0)]) == []
    assert len(build_gates([_cone(0, 0), _cone(1.5, 0)])) == 1


def test_build_gates_square_enumeration():
    # 3 m square: 4 sides plus both ~4.24 m diagonals.
    cones = [_cone(0, 0), _cone(3, 0), _cone(3, 3), _cone(0, 3)]
    gates = build_gates(cones)
    assert len(gates) == 6
    widths = sorted(g.width for g in gates)
    assert widths[:4] == pytest.approx([3.0] * 4)
    assert widths[4:] == pytest.approx([math.sqrt(18)] * 2)


# --- gate cost ------------------------------------------------------------------


def test_cost_straight_nominal_gate_is_distance_only():
    g = _gate((4.0, 1.5), (4.0, -1.5))
    w = GateCostWeights()
    c = gate_cost(g, (0.0, 0.0), (-1.0, 0.0), w)
    expected = w.distance * 4.0 + w.distance_quad * (4.0 - w.nominal_spacing) ** 2
    assert c == pytest.approx(expected, abs=1e-12)


def test_cost_color_tiers():
    w = GateCostWeights()
    base = dict(prev1=(0.0, 0.0), prev2=(-1.0, 0.0))
    # travel +x: (4, 1.5) is the left cone
    combos = [
        ((ConeColor.BLUE, ConeColor.YELLOW), 0.0),
        ((ConeColor.UNKNOWN, ConeColor.YELLOW), 5.0),
        ((ConeColor.BLUE, ConeColor.BLUE), 20.0),
        ((ConeColor.YELLOW, ConeColor.BLUE), 50.0),
    ]
    ref = gate_cost(_gate((4, 1.5), (4, -1.5)), base["prev1"], base["prev2"], w)
    for (cl, cr), tier in combos:
        c = gate_cost(
            _gate((4, 1.5), (4, -1.5), cl, cr), base["prev1"], base["prev2"], w
        )
        assert c - ref == pytest.approx(tier, abs=1e-12)


def test_cost_color_uses_travel_frame_not_storage_order():
    w = GateCostWeights()
    a = gate_cost(
        _gate((4, 1.5), (4, -1.5), ConeColor.BLUE, ConeColor.YELLOW),
        (0, 0),
        (-1, 0),
        w,
    )
    # same gate with endpoints stored swapped must cost the same
    b = gate_cost(
        _gate((4, -1.5), (4, 1.5), ConeColor.YELLOW, ConeColor.BLUE),
        (0, 0),
        (-1, 0),
        w,
    )
    assert a == pytest.approx(b, abs=1e-12)


def test_cost_wider_gate_costs_more():
    w = GateCostWeights()
    narrow = gate_cost(_gate((4, 1.5), (4, -1.5)), (0, 0), (-1, 0), w)
    wide = gate_cost(_gate((4, 2.75), (4, -2.75)), (0, 0), (-1, 0), w)
    assert wide - narrow == pytest.approx(w.width * 2.5, abs=1e-12)


def test_cost_pass_angle_term():
    w = GateCostWeights()
    straight = gate_cost(_gate((4, 1.5), (4, -1.5)), (0, 0), (-1, 0), w)
    r = 1.5 / math.sqrt(2)
    skewed = gate_cost(_gate((4 - r, r), (4 + r, -r)), (0, 0), (-1, 0), w)
    assert skewed - straight == pytest.approx(w.pass_angle * math.pi / 4, abs=1e-9)


def test_cost_heading_change_term():
    w = GateCostWeights(width=0.0, pass_angle=0.0)
    ahead = gate_cost(_gate((4, 1.5), (4, -1.5)), (0, 0), (-1, 0), w)
    # same travel distance, 90 degrees to the left
    left = gate_cost(_gate((-1.5, 4), (1.5, 4)), (0, 0), (-1, 0), w)
    assert left - ahead == pytest.approx(w.heading_change * math.pi / 2, abs=1e-9)


def test_cost_rigid_motion_invariant():
    rng = np.random.default_rng(7)
    w = GateCostWeights()
    for _ in range(50):
        pl = rng.uniform(-5, 5, 2)
        pr = pl + rng.uniform(1.6, 5.5) * _unit(rng.uniform(-np.pi, np.pi))
        p1 = rng.uniform(-5, 5, 2)
        p2 = p1 + _unit(rng.uniform(-np.pi, np.pi))
        g = _gate(pl, pr)
        c0 = gate_cost(g, tuple(p1), tuple(p2), w)
        th = rng.uniform(-np.pi, np.pi)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        t = rng.uniform(-50, 50, 2)
        g2 = _gate(R @ pl + t, R @ pr + t)
        c1 = gate_cost(g2, tuple(R @ p1 + t), tuple(R @ p2 + t), w)
        assert c1 == pytest.approx(c0, rel=1e-9, abs=1e-9)


def _unit(th):
    return np.array([math.cos(th), math.sin(th)])


# --- track generator and exhaustive baseline -----------------------------------


def _corridor(rng, n_stations, max_turn=0.3, spacing=(3.0, 5.0), width=(2.6, 3.8)):
    """Random meandering corridor; last station is the orange finish pair."""
    heading = rng.uniform(-np.pi, np.pi)
    pos = np.zeros(2)
    start = Pose2(pos[0], pos[1], heading)
    cones = []
    mids = []
    for k in range(n_stations):
        heading += rng.uniform(-max_turn, max_turn)
        pos = pos + rng.uniform(*spacing) * _unit(heading)
        wdt = rng.uniform(*width)
        n = np.array([-math.sin(heading), math.cos(heading)])
        last = k == n_stations - 1
        cl = ConeColor.ORANGE_LARGE if last else ConeColor.BLUE
        cr = ConeColor.ORANGE_LARGE if last else ConeColor.YELLOW
        cones.append(_cone(*(pos + n * wdt / 2), cl))
        cones.append(_cone(*(pos - n * wdt / 2), cr))
        mids.append(pos.copy())
    return start, cones, np.array(mids)


def _sparse_corridor(rng, n_stations, n_decoys):
    """Chain corridor whose stations are too far apart to cross-pair, plus
    decoy cones that each form one or two off-corridor gates."""
    start, cones, mids = _corridor(
        rng, n_stations, max_turn=0.3, spacing=(6.1, 7.5), width=(2.6, 3.6)
    )
    for k in rng.choice(n_stations - 1, size=n_decoys, replace=False):
        heading = math.atan2(*(mids[k + 1] - mids[k])[::-1])
        n = np.array([-math.sin(heading), math.cos(heading)])
        side = rng.choice([-1.0, 1.0])
        decoy = mids[k] + side * rng.uniform(4.5, 5.5) * n
        cones.append(_cone(*decoy, ConeColor.UNKNOWN))
    return start, cones


def _exhaustive_best(cones, start, w):
    """Brute-force minimum-cost simple path ending at a finish gate."""
    gates = build_gates(cones, w)
    best = {"cost": math.inf, "seq": None}

    def walk(p1, p2, used, acc, seq):
        if acc >= best["cost"]:
            return
        kids = []
        for i, g in enumerate(gates):
            if i in used:
                continue
            c = g.center
            d2 = (c[0] - p1[0]) ** 2 + (c[1] - p1[1]) ** 2
            if d2 > w.search_radius**2 or d2 <= 0.01:
                continue
            kids.append((gate_cost(g, p1, p2, w), i))
        kids.sort()
        for cost, i in kids:
            g = gates[i]
            if g.is_finish:
                if acc + cost < best["cost"]:
                    best["cost"] = acc + cost
                    best["seq"] = seq + [i]
                continue
            walk(g.center, p1, used | {i}, acc + cost, seq + [i])

    p2 = (start.x - math.cos(start.psi), start.y - math.sin(start.psi))
    walk((start.x, start.y), p2, frozenset(), 0.0, [])
    return best["cost"], best["seq"], gates


def test_beam_matches_exhaustive_on_small_tracks():
    w = GateCostWeights()
    mismatches = []
    for seed in range(100):
        for retry in range(20):  # keep tracks at or below 12 gates
            rng = np.random.default_rng((seed, retry))
            n_stations = int(rng.integers(5, 10))
            start, cones = _sparse_corridor(
                rng, n_stations, int(rng.integers(1, 4))
            )
            if len(build_gates(cones, w)) <= 12:
                break
        cost_ref, seq_ref, gates = _exhaustive_best(cones, start, w)
        assert seq_ref is not None
        path = detect_centerline(cones, start, w)
        ref_centers = np.array([gates[i].center for i in seq_ref])
        if not (
            path.complete
            and len(path.centers) == len(ref_centers)
            and np.allclose(path.centers, ref_centers, atol=1e-9)
        ):
            mismatches.append(seed)
        else:
            assert path.cost == pytest.approx(cost_ref, rel=1e-9)
    assert mismatches == []


def test_committed_centers_stay_inside_corridor():
    for seed in range(30):
        rng = np.random.default_rng(1000 + seed)
        start, cones, mids = _corridor(rng, 10)
        path = detect_centerline(cones, start)
        for c in path.centers:
            assert np.min(np.linalg.norm(mids - c, axis=1)) < 2.0


# --- beam search behavior --------------------------------------------------------


def _straight_track(n=10, spacing=3.0, width=3.0):
    cones = []
    for k in range(1, n + 1):
        cones.append(_cone(k * spacing, width / 2, ConeColor.BLUE))
        cones.append(_cone(k * spacing, -width / 2, ConeColor.YELLOW))
    x_fin = (n + 1) * spacing
    cones.append(_cone(x_fin, width / 2, ConeColor.ORANGE_LARGE))
    cones.append(_cone(x_fin, -width / 2, ConeColor.ORANGE_LARGE))
    return cones, x_fin


def test_straight_corridor_commits_every_midpoint():
    cones, x_fin = _straight_track()
    path = detect_centerline(cones, Pose2(0, 0, 0))
    assert path.complete
    expected = np.column_stack([np.arange(3.0, x_fin + 1, 3.0), np.zeros(11)])
    np.testing.assert_allclose(path.centers, expected, atol=1e-9)


def test_detection_is_deterministic():
    cones, _ = _straight_track()
    a = detect_centerline(cones, Pose2(0, 0, 0))
    b = detect_centerline(cones, Pose2(0, 0, 0))
    np.testing.assert_array_equal(a.centers, b.centers)
    assert a.cost == b.cost


def test_detection_rigid_motion_invariant():
    rng = np.random.default_rng(5)
    start, cones, _ = _corridor(rng, 8)
    base = detect_centerline(cones, start)
    th, t = 2.1, np.array([40.0, -17.0])
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moved = [_cone(*(R @ c.position + t), c.color) for c in cones]
    start2 = Pose2(*(R @ np.array([start.x, start.y]) + t), start.psi + th)
    out = detect_centerline(moved, start2)
    np.testing.assert_allclose(
        out.centers, (R @ base.centers.T).T + t, atol=1e-6
    )


def test_no_path_when_too_few_gates():
    with pytest.raises(NoPath):
        detect_centerline([_cone(3, 1.5), _cone(3, -1.5, ConeColor.YELLOW)],
                          Pose2(0, 0, 0))
    with pytest.raises(NoPath):
        detect_centerline([], Pose2(0, 0, 0))


def test_no_path_when_gates_out_of_reach():
    cones = []
    for k in range(5):
        cones.append(_cone(30 + 3 * k, 1.5))
        cones.append(_cone(30 + 3 * k, -1.5, ConeColor.YELLOW))
    with pytest.raises(NoPath):
        detect_centerline(cones, Pose2(0, 0, 0))


def test_partial_path_without_finish_is_incomplete():
    cones, _ = _straight_track(n=6)
    cones = cones[:-2]  # drop the finish pair
    path = detect_centerline(cones, Pose2(0, 0, 0))
    assert not path.complete
    assert len(path.centers) >= 3


def test_max_gates_caps_committed_length():
    cones, _ = _straight_track(n=10)
    path = detect_centerline(cones, Pose2(0, 0, 0), max_gates=4)
    assert len(path.centers) == 4
    assert not path.complete


def test_hairpin_with_missing_inner_cone_still_closes():
    rng = np.random.default_rng(3)
    cones = []
    heading, pos = 0.0, np.zeros(2)
    for k in range(9):
        heading += 0.45 if 2 <= k <= 6 else 0.0  # 180 degree left hairpin
        pos = pos + 3.0 * _unit(heading)
        n = np.array([-math.sin(heading), math.cos(heading)])
        last = k == 8
        cl = ConeColor.ORANGE_LARGE if last else ConeColor.BLUE
        cr = ConeColor.ORANGE_LARGE if last else ConeColor.YELLOW
        if not (k == 4):  # inner (left) cone missing mid-hairpin
            cones.append(_cone(*(pos + n * 1.5), cl))
        cones.append(_cone(*(pos - n * 1.5), cr))
    path = detect_centerline(cones, Pose2(0, 0, 0))
    assert path.complete
    assert len(path.centers) >= 5


# --- fixed layouts ---------------------------------------------------------------


def test_hardcoded_acceleration_line():
    path = hardcoded_centerline("acceleration")
    assert path.complete
    np.testing.assert_allclose(path.centers[0], [0.0, 0.0])
    np.testing.assert_allclose(path.centers[-1], [75.0, 0.0])
    assert np.all(path.centers[:, 1] == 0.0)
    assert np.all(np.diff(path.centers[:, 0]) > 0)


def test_hardcoded_skidpad_length_matches_geometry():
    path = hardcoded_centerline("skidpad")
    seg = np.diff(path.centers, axis=0)
    length = float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))
    analytic = 4.0 * 2.0 * math.pi * 9.125 + 15.0 + 15.0
    assert length == pytest.approx(analytic, abs=0.01)


def test_hardcoded_skidpad_figure_eight_geometry():
    path = hardcoded_centerline("skidpad")
    pts = path.centers
    np.testing.assert_allclose(pts[0], [-15.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(pts[-1], [15.0, 0.0], atol=1e-12)
    # center crossing: the origin is visited repeatedly (entry, between
    # laps, between circles, exit)
    at_origin = np.nonzero(np.linalg.norm(pts, axis=1) < 1e-6)[0]
    assert len(at_origin) >= 4
    assert np.max(np.diff(at_origin)) > 50  # distinct visits, not duplicates
    # every sample lies on one of the four primitives: entry segment,
    # either drive circle, exit segment
    on_entry = (np.abs(pts[:, 1]) < 1e-9) & (pts[:, 0] <= 0.0)
    on_exit = (np.abs(pts[:, 1]) < 1e-9) & (pts[:, 0] >= 0.0)
    r_right = np.hypot(pts[:, 0], pts[:, 1] + 9.125)
    r_left = np.hypot(pts[:, 0], pts[:, 1] - 9.125)
    on_circle = (np.abs(r_right - 9.125) < 1e-9) | (np.abs(r_left - 9.125) < 1e-9)
    assert np.all(on_entry | on_exit | on_circle)
    # the circles are externally tangent (center gap = 2 R), so their only
    # shared point is the origin: self-intersection happens there and
    # nowhere else
    geo_gap = 18.25
    assert geo_gap == pytest.approx(2 * 9.125)


def test_unknown_mission_raises():
    with pytest.raises(UnknownMission):
        hardcoded_centerline("autocross")
