"""Arclength-parametrized cubic spline over centerline points.

Input points are resampled to even 4 m chords; the chord-length parameter
approximates arclength well at that spacing and any residual drift is
absorbed by the per-tick progress correction.  Open centerlines continue
as straight runways beyond both ends; closed ones use periodic boundary
conditions so the loop is C2 across the seam.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.interpolate import CubicSpline

from ._jit import maybe_njit

__all__ = [
    "ProgressOutOfDomain",
    "resample_polyline",
    "CenterlineSpline",
    "track_progress_correction",
]


@maybe_njit
def _eval_pair(bk, cx, cy, dcx, dcy, p):
    """Evaluate both piecewise cubics and their tangents in one pass.

    Same interval selection and Horner order as the scipy polynomials the
    coefficients came from; exists only because per-call dispatch overhead
    dominates when the controller evaluates short horizons thousands of
    times per second.
    """
    m = p.size
    n = bk.size - 1
    x = np.empty(m)
    y = np.empty(m)
    dx = np.empty(m)
    dy = np.empty(m)
    for i in range(m):
        v = p[i]
        if v <= bk[0]:
            j = 0
        elif v >= bk[n]:
            j = n - 1
        else:
            lo = 0
            hi = n
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if v >= bk[mid]:
                    lo = mid
                else:
                    hi = mid
            j = lo
        t = v - bk[j]
        x[i] = ((cx[0, j] * t + cx[1, j]) * t + cx[2, j]) * t + cx[3, j]
        y[i] = ((cy[0, j] * t + cy[1, j]) * t + cy[2, j]) * t + cy[3, j]
        dx[i] = (dcx[0, j] * t + dcx[1, j]) * t + dcx[2, j]
        dy[i] = (dcy[0, j] * t + dcy[1, j]) * t + dcy[2, j]
    return x, y, dx, dy


class ProgressOutOfDomain(Exception):
    """Queried progress lies beyond the spline and its runway."""


def resample_polyline(points: np.ndarray, spacing: float = 4.0,
                      closed: bool = False) -> np.ndarray:
    """Resample a polyline at even chord spacing via linear interpolation."""
    pts = np.asarray(points, dtype=float)
    if closed and not np.allclose(pts[0], pts[-1]):
        pts = np.vstack([pts, pts[0]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-12])
    pts = pts[keep]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0),
                                                        axis=1))])
    total = s[-1]
    n = max(int(round(total / spacing)), 2 if closed else 1)
    grid = np.linspace(0.0, total, n + 1)
    out = np.column_stack([np.interp(grid, s, pts[:, 0]),
                           np.interp(grid, s, pts[:, 1])])
    return out[:-1] if closed else out


class CenterlineSpline:
    """Cubic spline through points with straight-runway extrapolation."""

    def __init__(self, points: np.ndarray, closed: bool = False,
                 runway: float = 100.0):
        pts = np.asarray(points, dtype=float)
        if closed and not np.allclose(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[0]])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-12])
        pts = pts[keep]
        if len(pts) < (3 if closed else 2):
            raise ValueError("need at least 2 distinct points")
        t = np.concatenate([[0.0],
                            np.cumsum(np.linalg.norm(np.diff(pts, axis=0),
                                                     axis=1))])
        bc = "periodic" if closed else "natural"
        self._sx = CubicSpline(t, pts[:, 0], bc_type=bc)
        self._sy = CubicSpline(t, pts[:, 1], bc_type=bc)
        self._dx = self._sx.derivative()
        self._dy = self._sy.derivative()
        self._bk = np.ascontiguousarray(self._sx.x)
        self._cx = np.ascontiguousarray(self._sx.c)
        self._cy = np.ascontiguousarray(self._sy.c)
        self._dcx = np.ascontiguousarray(self._dx.c)
        self._dcy = np.ascontiguousarray(self._dy.c)
        self.length = float(t[-1])
        self.closed = closed
        self.runway = float(runway)
        self.knots = t
        self.points = pts
        # unit end tangents for the straight runways
        t0x, t0y = float(self._dx(0.0)), float(self._dy(0.0))
        n0 = math.hypot(t0x, t0y)
        self._tan0 = (t0x / n0, t0y / n0)
        t1x, t1y = float(self._dx(self.length)), float(self._dy(self.length))
        n1 = math.hypot(t1x, t1y)
        self._tan1 = (t1x / n1, t1y / n1)
        self._p0 = (float(pts[0, 0]), float(pts[0, 1]))
        self._p1 = (float(pts[-1, 0]), float(pts[-1, 1]))

    def _check(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self.closed:
            return np.mod(p, self.length)
        if np.any(p < -self.runway) or np.any(p > self.length + self.runway):
            raise ProgressOutOfDomain(
                f"progress outside [{-self.runway:.0f}, "
                f"{self.length + self.runway:.0f}]"
            )
        return p

    def _core(self, p):
        """Shared evaluation: kernel on the clipped span, runways outside."""
        p = self._check(p)
        scalar = np.ndim(p) == 0
        p = np.atleast_1d(np.asarray(p, dtype=float))
        x, y, dx, dy = _eval_pair(
            self._bk,
            self._cx,
            self._cy,
            self._dcx,
            self._dcy,
            np.clip(p, 0.0, self.length),
        )
        if not self.closed:
            lo = p < 0.0
            hi = p > self.length
            if np.any(lo):
                x[lo] = self._p0[0] + self._tan0[0] * p[lo]
                y[lo] = self._p0[1] + self._tan0[1] * p[lo]
                dx[lo], dy[lo] = self._tan0
            if np.any(hi):
                e = p[hi] - self.length
                x[hi] = self._p1[0] + self._tan1[0] * e
                y[hi] = self._p1[1] + self._tan1[1] * e
                dx[hi], dy[hi] = self._tan1
        return scalar, x, y, dx, dy

    def eval(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Positions X(p), Y(p); straight runways beyond open ends."""
        scalar, x, y, _, _ = self._core(p)
        return (float(x[0]), float(y[0])) if scalar else (x, y)

    def derivative(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Tangents dX/dp, dY/dp (constant unit tangent on the runways)."""
        scalar, _, _, dx, dy = self._core(p)
        return (float(dx[0]), float(dy[0])) if scalar else (dx, dy)

    def eval_tangent(self, p):
        """Positions and tangents together; one kernel pass for hot loops."""
        scalar, x, y, dx, dy = self._core(p)
        if scalar:
            return float(x[0]), float(y[0]), float(dx[0]), float(dy[0])
        return x, y, dx, dy

    def heading(self, p) -> float:
        dx, dy = self.derivative(p)
        return math.atan2(dy, dx) if np.ndim(dx) == 0 else np.arctan2(dy, dx)


def _golden(f, a: float, b: float, tol: float = 1e-6) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def track_progress_correction(xy, spline: CenterlineSpline, p_estimate: float,
                              bracket: float = 6.0) -> float:
    """Snap a progress estimate to the arclength of the closest spline point.

    Golden-section search over a local bracket around the estimate; the
    integrated progress state drifts slowly, so a local search suffices.
    """
    px, py = float(xy[0]), float(xy[1])

    def dist2(p):
        x, y = spline.eval(p)
        return (x - px) ** 2 + (y - py) ** 2

    a = p_estimate - bracket
    b = p_estimate + bracket
    if not spline.closed:
        a = max(a, -spline.runway)
        b = min(b, spline.length + spline.runway)
    return _golden(dist2, a, b)
