"""Track centerline extraction from a cone map.

Cones are paired into gates (candidate track cross-sections); an incremental
beam search walks gate-to-gate from the car, scoring each step by geometry
and cone colors, and commits one gate per iteration after a depth-3,
branch-3 lookahead.  Acceleration and Skidpad use fixed, known layouts
instead of detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import ConeColor, Pose2, angle_diff
from .slam import load_skidpad_geometry

__all__ = [
    "Gate",
    "GateCostWeights",
    "CenterlinePath",
    "CenterlineError",
    "NoPath",
    "UnknownMission",
    "build_gates",
    "gate_cost",
    "detect_centerline",
    "hardcoded_centerline",
]


class CenterlineError(Exception):
    """Base class for centerline extraction failures."""


class NoPath(CenterlineError):
    """No acceptable gate sequence could be assembled."""


class UnknownMission(CenterlineError):
    """Mission has no fixed layout."""


@dataclass(frozen=True)
class Gate:
    """A pair of cones treated as a track cross-section.

    Endpoint order carries no meaning; which cone is on the car's left is
    resolved from the travel direction at costing time.
    """

    id_left: int
    id_right: int
    p_left: tuple[float, float]
    p_right: tuple[float, float]
    color_left: ConeColor
    color_right: ConeColor

    @property
    def center(self) -> tuple[float, float]:
        return (
            0.5 * (self.p_left[0] + self.p_right[0]),
            0.5 * (self.p_left[1] + self.p_right[1]),
        )

    @property
    def width(self) -> float:
        return math.hypot(
            self.p_left[0] - self.p_right[0], self.p_left[1] - self.p_right[1]
        )

    @property
    def is_finish(self) -> bool:
        return (
            self.color_left is ConeColor.ORANGE_LARGE
            and self.color_right is ConeColor.ORANGE_LARGE
        )


@dataclass
class GateCostWeights:
    """Coefficients of the gate scoring function.

    The distance term is the hop length plus a quadratic penalty on its
    deviation from the nominal gate spacing, so skipping a real gate or
    stuffing in half-station gates both cost strictly more than walking
    the evenly spaced chain.
    """

    distance: float = 1.0
    distance_quad: float = 0.1
    nominal_spacing: float = 3.0
    width: float = 0.5
    heading_change: float = 2.0
    pass_angle: float = 1.0
    # correct / uncertain / same-color / inverted
    color_tiers: tuple[float, float, float, float] = (0.0, 5.0, 20.0, 50.0)
    nominal_width: float = 3.0
    search_radius: float = 8.0
    min_pair_distance: float = 1.5
    max_pair_distance: float = 6.0


@dataclass
class CenterlinePath:
    """Ordered gate centers with their accumulated cost."""

    centers: np.ndarray  # (K, 2)
    cost: float
    complete: bool
    gates: tuple[Gate, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.centers)


def build_gates(cones: Sequence, weights: GateCostWeights | None = None) -> list[Gate]:
    """Pair up cones whose separation lies inside the track-width bounds.

    `cones` is any sequence of objects with `.position` (2-vector) and
    `.color`.  Each unordered pair appears once.
    """
    w = weights or GateCostWeights()
    if len(cones) < 2:
        return []
    pts = np.array([np.asarray(c.position, dtype=float)[:2] for c in cones])
    pairs = cKDTree(pts).query_pairs(r=w.max_pair_distance, output_type="ndarray")
    gates: list[Gate] = []
    for i, j in pairs:
        d = float(np.linalg.norm(pts[i] - pts[j]))
        if d < w.min_pair_distance:
            continue
        gates.append(
            Gate(
                id_left=int(i),
                id_right=int(j),
                p_left=(float(pts[i, 0]), float(pts[i, 1])),
                p_right=(float(pts[j, 0]), float(pts[j, 1])),
                color_left=cones[i].color,
                color_right=cones[j].color,
            )
        )
    return gates


def _color_tier(left: ConeColor, right: ConeColor) -> int:
    if left is ConeColor.ORANGE_LARGE and right is ConeColor.ORANGE_LARGE:
        return 0
    if left is ConeColor.BLUE and right is ConeColor.YELLOW:
        return 0
    if left is ConeColor.YELLOW and right is ConeColor.BLUE:
        return 3
    if left is right and left in (ConeColor.BLUE, ConeColor.YELLOW):
        return 2
    return 1


def gate_cost(
    g: Gate,
    prev1: tuple[float, float],
    prev2: tuple[float, float],
    weights: GateCostWeights | None = None,
) -> float:
    """Score one candidate step prev2 -> prev1 -> g.

    Terms: travel distance, gate width deviation, heading change, crossing
    angle relative to the gate normal, and a color tier.  Uses only
    relative geometry, so the score is invariant under rigid motions of
    the whole scene.
    """
    w = weights or GateCostWeights()
    cx, cy = g.center
    dx, dy = cx - prev1[0], cy - prev1[1]
    dist = math.hypot(dx, dy)
    if dist < 1e-9:
        return math.inf
    heading_new = math.atan2(dy, dx)
    heading_old = math.atan2(prev1[1] - prev2[1], prev1[0] - prev2[0])
    turn = abs(angle_diff(heading_new, heading_old))

    # crossing angle: deviation of travel from the gate normal, folded to
    # [0, pi/2] because the normal sign is arbitrary
    ax, ay = g.p_right[0] - g.p_left[0], g.p_right[1] - g.p_left[1]
    normal = math.atan2(ax, -ay)
    cross_dev = abs(angle_diff(heading_new, normal))
    cross_dev = min(cross_dev, math.pi - cross_dev)

    # which cone is on the travel-left side
    rx, ry = g.p_left[0] - cx, g.p_left[1] - cy
    if dx * ry - dy * rx >= 0.0:
        tier = _color_tier(g.color_left, g.color_right)
    else:
        tier = _color_tier(g.color_right, g.color_left)

    gap = dist - w.nominal_spacing
    return (
        w.distance * dist
        + w.distance_quad * gap * gap
        + w.width * abs(g.width - w.nominal_width)
        + w.heading_change * turn
        + w.pass_angle * cross_dev
        + w.color_tiers[tier]
    )


def _children(
    gates: list[Gate],
    centers: np.ndarray,
    prev1: tuple[float, float],
    prev2: tuple[float, float],
    used: frozenset[int],
    w: GateCostWeights,
    branch: int,
) -> list[tuple[float, int]]:
    d2 = (centers[:, 0] - prev1[0]) ** 2 + (centers[:, 1] - prev1[1]) ** 2
    idx = np.nonzero(d2 <= w.search_radius**2)[0]
    scored = [
        (gate_cost(gates[i], prev1, prev2, w), int(i))
        for i in idx
        if int(i) not in used and d2[i] > 0.01
    ]
    scored.sort()
    return scored[:branch]


def detect_centerline(
    cones: Sequence,
    start: Pose2,
    weights: GateCostWeights | None = None,
    max_gates: int = 60,
    depth: int = 3,
    branch: int = 3,
) -> CenterlinePath:
    """Walk the gate graph from the start pose, committing one gate per step.

    Each iteration expands a depth-`depth` tree with `branch` children per
    node, commits the first gate of the cheapest root-to-leaf path, and
    stops on a finish gate (both cones large orange), on `max_gates`, or
    when no gate lies within reach.  Deeper lookahead paths outrank shorter
    dead ends; a path ending at a finish gate counts as full depth.
    Lookahead windows are ranked by cost per meter of arc: windows spanning
    different arc lengths are otherwise incomparable, and raw sums reward
    covering as little track as possible inside the window.

    Raises NoPath if fewer than 3 gates can be chained.
    """
    w = weights or GateCostWeights()
    gates = build_gates(cones, w)
    committed: list[Gate] = []
    committed_idx: set[int] = set()
    cost_total = 0.0
    complete = False

    if gates:
        centers = np.array([g.center for g in gates])
        prev2 = (start.x - math.cos(start.psi), start.y - math.sin(start.psi))
        prev1 = (start.x, start.y)

        while len(committed) < max_gates:
            best = None  # (neg effective depth, cost per arc, first child)

            def descend(p1, p2, used, acc, arc, first, level):
                nonlocal best
                kids = _children(gates, centers, p1, p2, used, w, branch)
                if not kids:
                    if first is not None:
                        key = (-level, acc / arc, first)
                        if best is None or key < best:
                            best = key
                    return
                for c, i in kids:
                    g = gates[i]
                    f = first if first is not None else i
                    hop = math.dist(p1, g.center)
                    if g.is_finish or level + 1 == depth:
                        # finish gates close the path; rank them as full depth
                        lvl = depth if g.is_finish else level + 1
                        key = (-lvl, (acc + c) / (arc + hop), f)
                        if best is None or key < best:
                            best = key
                        continue
                    descend(
                        g.center, p1, used | {i}, acc + c, arc + hop, f,
                        level + 1,
                    )

            descend(prev1, prev2, frozenset(committed_idx), 0.0, 0.0, None, 0)
            if best is None:
                break
            pick = gates[best[2]]
            cost_total += gate_cost(pick, prev1, prev2, w)
            committed.append(pick)
            committed_idx.add(best[2])
            prev2, prev1 = prev1, pick.center
            if pick.is_finish:
                complete = True
                break

    if len(committed) < 3:
        raise NoPath(
            f"only {len(committed)} gates reachable from "
            f"({start.x:.1f}, {start.y:.1f})"
        )
    return CenterlinePath(
        centers=np.array([g.center for g in committed]),
        cost=cost_total,
        complete=complete,
        gates=tuple(committed),
    )


def hardcoded_centerline(mission: str) -> CenterlinePath:
    """Fixed layouts for the two known-geometry missions.

    Acceleration is a straight 75 m line; Skidpad is entry, two clockwise
    laps of the right circle, two counterclockwise laps of the left circle,
    then exit, sampled densely enough that polyline length matches the
    analytic arc length to well under a centimeter.
    """
    if mission == "acceleration":
        x = np.arange(0.0, 76.0, 1.0)
        centers = np.column_stack([x, np.zeros_like(x)])
        return CenterlinePath(centers=centers, cost=0.0, complete=True)
    if mission == "skidpad":
        geo = load_skidpad_geometry()
        radius = float(geo["drive_radius"])
        half_span = float(geo["circle_center_spacing"]) / 2.0
        entry = float(geo["entry_length"])
        exit_len = float(geo["exit_length"])
        step = 0.25
        n = int(math.ceil(4.0 * math.pi * radius / step))
        n += n & 1  # even: the lap-boundary pass lands exactly on a vertex
        k = np.arange(n + 1)
        th_r = math.pi / 2.0 - 4.0 * math.pi * k / n
        right = np.column_stack(
            [radius * np.cos(th_r), -half_span + radius * np.sin(th_r)]
        )
        th_l = -math.pi / 2.0 + 4.0 * math.pi * k / n
        left = np.column_stack(
            [radius * np.cos(th_l), half_span + radius * np.sin(th_l)]
        )
        xin = np.arange(-entry, 0.0, step)
        lead = np.column_stack([xin, np.zeros_like(xin)])
        xout = np.linspace(0.0, exit_len, int(exit_len / step) + 1)
        tail = np.column_stack([xout, np.zeros_like(xout)])
        # segment joints all land exactly on the origin; drop duplicates
        centers = np.vstack([lead, right, left[1:], tail[1:]])
        return CenterlinePath(centers=centers, cost=0.0, complete=True)
    raise UnknownMission(mission)
