"""Bicycle vehicle models for planning and simulation.

A kinematic single-track model covers low speed, a linear-tire dynamic
single-track model covers high speed, and the two are blended linearly
between 3 and 6 m/s.  The extended state also carries the actuator
integrators (steering angle, throttle) and centerline progress so the whole
stage map is one ODE.  Analytic Jacobians of the blended dynamics and of
the RK4 stage map are provided for the optimizer.

Extended state s = (X, Y, vx, vy, theta, omega, p, delta, D);
stage input  w = (phi, dD, dp) = (steering rate, throttle rate, progress speed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._jit import maybe_njit

__all__ = [
    "VehicleParams",
    "N_STATE",
    "N_INPUT",
    "blend_alpha",
    "drive_force",
    "f_blended",
    "f_blended_jac",
    "rk4_step",
    "rk4_step_jac",
]

N_STATE = 9
N_INPUT = 3

# low-speed guard for slip-angle denominators
_V_GUARD = 0.3
_BLEND_LO = 3.0
_BLEND_HI = 6.0


@dataclass
class VehicleParams:
    """Single-track model constants (also used as simulator ground truth)."""

    mass: float = 190.0
    lf: float = 0.765
    lr: float = 0.765
    cornering_stiffness: float = 5000.0
    a_max: float = 10.0
    yaw_inertia: float = 110.0
    # positive drive force tapers to zero at v_top (motor back-EMF limit)
    v_top: float = 13.0
    delta_max: float = 0.45
    steer_full_travel_time: float = 0.4
    throttle_rate_max: float = 400.0

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    @property
    def steer_rate_max(self) -> float:
        # full-to-full travel (2 delta_max) within the actuator travel time
        return 2.0 * self.delta_max / self.steer_full_travel_time

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.mass,
                self.lf,
                self.lr,
                self.cornering_stiffness,
                self.a_max,
                self.yaw_inertia,
                self.v_top,
                self.delta_max,
            ]
        )


def blend_alpha(vx: float) -> float:
    """Dynamic-model share: 0 below 3 m/s, 1 above 6 m/s, linear between."""
    return min(max((vx - _BLEND_LO) / (_BLEND_HI - _BLEND_LO), 0.0), 1.0)


def drive_force(D: float, vx: float, params: VehicleParams) -> float:
    """Longitudinal force from the throttle command D in [-100, 100]."""
    return _drive_force(
        D, vx, params.mass, params.a_max, params.v_top
    )


@maybe_njit
def _drive_force(D, vx, m, a_max, v_top):
    if D >= 0.0:
        taper = 1.0 - vx / v_top
        if taper < 0.0:
            taper = 0.0
        return (D / 100.0) * m * a_max * taper
    return (D / 100.0) * m * a_max


@maybe_njit
def _f(s, w, P):
    """Blended state derivative. P = VehicleParams.as_array()."""
    m, lf, lr, C, a_max, Iz, v_top, _dmax = (
        P[0], P[1], P[2], P[3], P[4], P[5], P[6], P[7],
    )
    L = lf + lr
    vx, vy, th, om, de, D = s[2], s[3], s[4], s[5], s[7], s[8]
    phi, dD, dp = w[0], w[1], w[2]

    F = _drive_force(D, vx, m, a_max, v_top)

    # dynamic single track, linear tires
    vg = vx if vx > _V_GUARD else _V_GUARD
    uf = vy + lf * om
    ur = vy - lr * om
    af = math.atan(uf / vg) - de
    ar = math.atan(ur / vg)
    Fcf = -C * af
    Fcr = -C * ar
    sd = math.sin(de)
    cd = math.cos(de)
    dvx_d = F / m + om * vy - Fcf * sd / m
    dvy_d = -om * vx + (Fcf * cd + Fcr) / m
    dom_d = (lf * Fcf * cd - lr * Fcr) / Iz

    # kinematic single track; lateral states track the steering geometry
    td = math.tan(de)
    sec2 = 1.0 + td * td
    dvx_k = F / m
    common = dvx_k * td + vx * phi * sec2
    kb = lr / L
    dvy_k = kb * common
    dom_k = common / L

    a = (vx - _BLEND_LO) / (_BLEND_HI - _BLEND_LO)
    if a < 0.0:
        a = 0.0
    elif a > 1.0:
        a = 1.0

    ds = np.empty(9)
    ds[0] = vx * math.cos(th) - vy * math.sin(th)
    ds[1] = vx * math.sin(th) + vy * math.cos(th)
    ds[2] = (1.0 - a) * dvx_k + a * dvx_d
    ds[3] = (1.0 - a) * dvy_k + a * dvy_d
    ds[4] = om
    ds[5] = (1.0 - a) * dom_k + a * dom_d
    ds[6] = dp
    ds[7] = phi
    ds[8] = dD
    return ds


@maybe_njit
def _fAB(s, w, P):
    """Derivative plus Jacobians A = df/ds (9x9) and B = df/dw (9x3)."""
    m, lf, lr, C, a_max, Iz, v_top, _dmax = (
        P[0], P[1], P[2], P[3], P[4], P[5], P[6], P[7],
    )
    L = lf + lr
    vx, vy, th, om, de, D = s[2], s[3], s[4], s[5], s[7], s[8]
    phi = w[0]

    # drive force and its partials
    if D >= 0.0:
        taper = 1.0 - vx / v_top
        if taper < 0.0:
            taper = 0.0
            F_vx = 0.0
        else:
            F_vx = -(D / 100.0) * m * a_max / v_top
        F = (D / 100.0) * m * a_max * taper
        F_D = (m * a_max / 100.0) * taper
    else:
        F = (D / 100.0) * m * a_max
        F_vx = 0.0
        F_D = m * a_max / 100.0

    vg = vx if vx > _V_GUARD else _V_GUARD
    g_vx = 1.0 if vx > _V_GUARD else 0.0
    uf = vy + lf * om
    ur = vy - lr * om
    den_f = vg * vg + uf * uf
    den_r = vg * vg + ur * ur
    af = math.atan(uf / vg) - de
    ar = math.atan(ur / vg)
    af_vx = -uf / den_f * g_vx
    af_vy = vg / den_f
    af_om = lf * vg / den_f
    ar_vx = -ur / den_r * g_vx
    ar_vy = vg / den_r
    ar_om = -lr * vg / den_r
    Fcf = -C * af
    Fcr = -C * ar
    sd = math.sin(de)
    cd = math.cos(de)

    dvx_d = F / m + om * vy - Fcf * sd / m
    dvy_d = -om * vx + (Fcf * cd + Fcr) / m
    dom_d = (lf * Fcf * cd - lr * Fcr) / Iz

    dvxd_vx = F_vx / m + C * af_vx * sd / m
    dvxd_vy = om + C * af_vy * sd / m
    dvxd_om = vy + C * af_om * sd / m
    dvxd_de = -(C * sd + Fcf * cd) / m  # dFcf/dde = +C
    dvxd_D = F_D / m

    dvyd_vx = -om + (-C * af_vx * cd - C * ar_vx) / m
    dvyd_vy = (-C * af_vy * cd - C * ar_vy) / m
    dvyd_om = -vx + (-C * af_om * cd - C * ar_om) / m
    dvyd_de = (C * cd - Fcf * sd) / m

    domd_vx = (-lf * C * af_vx * cd + lr * C * ar_vx) / Iz
    domd_vy = (-lf * C * af_vy * cd + lr * C * ar_vy) / Iz
    domd_om = (-lf * C * af_om * cd + lr * C * ar_om) / Iz
    domd_de = lf * (C * cd - Fcf * sd) / Iz

    td = math.tan(de)
    sec2 = 1.0 + td * td
    dvx_k = F / m
    common = dvx_k * td + vx * phi * sec2
    kb = lr / L
    dvy_k = kb * common
    dom_k = common / L
    com_vx = (F_vx / m) * td + phi * sec2
    com_de = dvx_k * sec2 + vx * phi * 2.0 * td * sec2
    com_D = (F_D / m) * td
    com_phi = vx * sec2

    a = (vx - _BLEND_LO) / (_BLEND_HI - _BLEND_LO)
    da = 1.0 / (_BLEND_HI - _BLEND_LO)
    if a < 0.0:
        a = 0.0
        da = 0.0
    elif a > 1.0:
        a = 1.0
        da = 0.0
    b = 1.0 - a

    ds = np.empty(9)
    ct = math.cos(th)
    st = math.sin(th)
    ds[0] = vx * ct - vy * st
    ds[1] = vx * st + vy * ct
    ds[2] = b * dvx_k + a * dvx_d
    ds[3] = b * dvy_k + a * dvy_d
    ds[4] = om
    ds[5] = b * dom_k + a * dom_d
    ds[6] = w[2]
    ds[7] = phi
    ds[8] = w[1]

    A = np.zeros((9, 9))
    A[0, 2] = ct
    A[0, 3] = -st
    A[0, 4] = -vx * st - vy * ct
    A[1, 2] = st
    A[1, 3] = ct
    A[1, 4] = vx * ct - vy * st

    A[2, 2] = b * (F_vx / m) + a * dvxd_vx + da * (dvx_d - dvx_k)
    A[2, 3] = a * dvxd_vy
    A[2, 5] = a * dvxd_om
    A[2, 7] = a * dvxd_de
    A[2, 8] = b * (F_D / m) + a * dvxd_D

    A[3, 2] = b * kb * com_vx + a * dvyd_vx + da * (dvy_d - dvy_k)
    A[3, 3] = a * dvyd_vy
    A[3, 5] = a * dvyd_om
    A[3, 7] = b * kb * com_de + a * dvyd_de
    A[3, 8] = b * kb * com_D

    A[4, 5] = 1.0

    A[5, 2] = b * com_vx / L + a * domd_vx + da * (dom_d - dom_k)
    A[5, 3] = a * domd_vy
    A[5, 5] = a * domd_om
    A[5, 7] = b * com_de / L + a * domd_de
    A[5, 8] = b * com_D / L

    B = np.zeros((9, 3))
    B[3, 0] = b * kb * com_phi
    B[5, 0] = b * com_phi / L
    B[6, 2] = 1.0
    B[7, 0] = 1.0
    B[8, 1] = 1.0
    return ds, A, B


@maybe_njit
def _clamp_actuators(s1, dmax):
    """Saturate the steering and throttle integrators; report what clipped."""
    c7 = 0
    c8 = 0
    if s1[7] > dmax:
        s1[7] = dmax
        c7 = 1
    elif s1[7] < -dmax:
        s1[7] = -dmax
        c7 = 1
    if s1[8] > 100.0:
        s1[8] = 100.0
        c8 = 1
    elif s1[8] < -100.0:
        s1[8] = -100.0
        c8 = 1
    return c7, c8


@maybe_njit
def _rk4_step(s, w, dt, P):
    k1 = _f(s, w, P)
    k2 = _f(s + (0.5 * dt) * k1, w, P)
    k3 = _f(s + (0.5 * dt) * k2, w, P)
    k4 = _f(s + dt * k3, w, P)
    s1 = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _clamp_actuators(s1, P[7])
    return s1


@maybe_njit
def _rk4_step_jac(s, w, dt, P):
    """One stage of RK4 with the Jacobians of the discrete map.

    F = ds1/ds and G = ds1/dw chain each RK4 stage through the previous
    ones; saturated actuator rows are zeroed, matching the clamped map.
    """
    k1, A1, B1 = _fAB(s, w, P)
    s2 = s + (0.5 * dt) * k1
    k2, A2, B2 = _fAB(s2, w, P)
    F2 = A2 @ (np.eye(9) + (0.5 * dt) * A1)
    G2 = B2 + (0.5 * dt) * (A2 @ B1)
    s3 = s + (0.5 * dt) * k2
    k3, A3, B3 = _fAB(s3, w, P)
    F3 = A3 @ (np.eye(9) + (0.5 * dt) * F2)
    G3 = B3 + (0.5 * dt) * (A3 @ G2)
    s4 = s + dt * k3
    k4, A4, B4 = _fAB(s4, w, P)
    F4 = A4 @ (np.eye(9) + dt * F3)
    G4 = B4 + dt * (A4 @ G3)

    s1 = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    F = np.eye(9) + (dt / 6.0) * (A1 + 2.0 * F2 + 2.0 * F3 + F4)
    G = (dt / 6.0) * (B1 + 2.0 * G2 + 2.0 * G3 + G4)
    c7, c8 = _clamp_actuators(s1, P[7])
    if c7 == 1:
        F[7, :] = 0.0
        G[7, :] = 0.0
    if c8 == 1:
        F[8, :] = 0.0
        G[8, :] = 0.0
    return s1, F, G


@maybe_njit
def _forward_pass(s0, Z, dt, P):
    """Roll the stage map over the whole horizon."""
    H = Z.shape[0]
    states = np.empty((H + 1, 9))
    states[0] = s0
    for k in range(H):
        states[k + 1] = _rk4_step(states[k], Z[k], dt, P)
    return states


@maybe_njit
def _forward_pass_jac(s0, Z, dt, P):
    H = Z.shape[0]
    states = np.empty((H + 1, 9))
    Fs = np.empty((H, 9, 9))
    Gs = np.empty((H, 9, 3))
    states[0] = s0
    for k in range(H):
        s1, F, G = _rk4_step_jac(states[k], Z[k], dt, P)
        states[k + 1] = s1
        Fs[k] = F
        Gs[k] = G
    return states, Fs, Gs


@maybe_njit
def _backward_pass(Fs, Gs, dJdS, dJdW):
    """Adjoint sweep turning per-state cost gradients into input gradients."""
    H = Fs.shape[0]
    grad = np.empty((H, 3))
    lam = dJdS[H].copy()
    for k in range(H - 1, -1, -1):
        grad[k] = dJdW[k] + Gs[k].T @ lam
        lam = dJdS[k] + Fs[k].T @ lam
    return grad


def _par_array(params) -> np.ndarray:
    """Accept a VehicleParams or an already-packed parameter vector."""
    if isinstance(params, VehicleParams):
        return params.as_array()
    return np.asarray(params, dtype=float)


def f_blended(s: np.ndarray, w: np.ndarray, params) -> np.ndarray:
    """Blended state derivative at extended state s under stage input w."""
    return _f(np.asarray(s, dtype=float), np.asarray(w, dtype=float),
              _par_array(params))


def f_blended_jac(s: np.ndarray, w: np.ndarray, params):
    """Derivative with analytic Jacobians (df/ds, df/dw)."""
    return _fAB(np.asarray(s, dtype=float), np.asarray(w, dtype=float),
                _par_array(params))


def rk4_step(s: np.ndarray, w: np.ndarray, dt: float,
             params) -> np.ndarray:
    """Integrate one control stage; actuator states saturate exactly."""
    return _rk4_step(np.asarray(s, dtype=float), np.asarray(w, dtype=float),
                     dt, _par_array(params))


def rk4_step_jac(s: np.ndarray, w: np.ndarray, dt: float, params):
    return _rk4_step_jac(np.asarray(s, dtype=float),
                         np.asarray(w, dtype=float), dt, _par_array(params))
