"""Receding-horizon controller on a spline-parametrized centerline.

Every tick solves, over an H = 40 * 50 ms horizon, for the stage inputs
(steering rate, throttle rate, progress speed) that maximize progress and
speed while penalizing input effort and distance from the centerline.  The
corridor constraint d <= (0.7 m)^2 + S with S >= 0 and a quadratic slack
penalty is handled exactly: the optimal slack is S* = max(0, d - 0.49), so
slacks never appear as decision variables.  Actuator magnitudes saturate
inside the rollout, input rates are box constraints, and the remaining
smooth problem is solved by damped-BFGS SQP steps with a projected Armijo
line search, hot-started from the previous solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import maybe_njit
from .spline import CenterlineSpline
from .vehicle import (
    N_INPUT,
    N_STATE,
    VehicleParams,
    _forward_pass,
    _forward_pass_jac,
    _backward_pass,
)

__all__ = [
    "MpcWeights",
    "ControlCommand",
    "MpcSolution",
    "corridor_terms",
    "MpcSolver",
]

_CORRIDOR_SQ_DEFAULT = 0.7 * 0.7


@dataclass
class MpcWeights:
    """Objective coefficients, horizon shape, and corridor geometry."""

    q_D: float = 1e-4
    q_phi: float = 3.0
    q_vx: float = 0.5
    q_p: float = 0.1
    q_s: float = 150.0
    q_d: float = 0.1
    # braking zones swap the speed reward for this quadratic penalty
    q_brake: float = 2.0
    # soft ceiling on vx when a mission speed cap is configured
    q_vcap: float = 4.0
    corridor_half_width: float = 0.7
    horizon: int = 40
    dt: float = 0.05

    def __post_init__(self):
        if self.q_s <= 0.0:
            raise ValueError("slack weight q_s must be positive")


@dataclass(frozen=True)
class ControlCommand:
    """Actuator set-points for the next control period."""

    steering: float
    throttle: float
    steering_rate: float = 0.0
    throttle_rate: float = 0.0


@dataclass
class MpcSolution:
    command: ControlCommand
    delta_u: np.ndarray  # (H, 3): steering rate, throttle rate, progress speed
    states: np.ndarray  # (H+1, 9) predicted extended states
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool
    objective_trace: list[float] = field(default_factory=list)


def corridor_terms(xy, p: float, spline: CenterlineSpline, slack: float,
                   half_width: float = 0.7) -> tuple[float, float]:
    """Squared centerline distance and corridor constraint residual.

    The constraint is satisfied iff the residual d - half_width^2 - S <= 0.
    """
    cx, cy = spline.eval(float(p))
    d = (float(xy[0]) - cx) ** 2 + (float(xy[1]) - cy) ** 2
    return d, d - half_width * half_width - slack


@maybe_njit
def _project(z, lb, ub):
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        v = z[i]
        if v < lb[i]:
            v = lb[i]
        elif v > ub[i]:
            v = ub[i]
        out[i] = v
    return out


class MpcSolver:
    """SQP solver with warm start over one spline instance."""

    def __init__(
        self,
        spline: CenterlineSpline,
        weights: MpcWeights | None = None,
        vehicle: VehicleParams | None = None,
        v_target: float | None = None,
        kkt_tol: float = 1e-4,
    ):
        self.spline = spline
        self.weights = weights or MpcWeights()
        self.vehicle = vehicle or VehicleParams()
        self.v_target = v_target
        self.kkt_tol = kkt_tol
        H = self.weights.horizon
        self._P = self.vehicle.as_array()
        self._z = np.zeros(H * N_INPUT)
        lb = np.tile(
            [-self.vehicle.steer_rate_max, -self.vehicle.throttle_rate_max, 0.0],
            H,
        )
        ub = np.tile(
            [
                self.vehicle.steer_rate_max,
                self.vehicle.throttle_rate_max,
                15.0,
            ],
            H,
        )
        self._lb = lb
        self._ub = ub

    def update_spline(self, spline: CenterlineSpline) -> None:
        self.spline = spline

    def reset(self) -> None:
        self._z[:] = 0.0

    # -- objective -------------------------------------------------------------

    def _state_cost(self, states: np.ndarray, braking: bool):
        """Cost terms on states 1..H plus their gradient rows."""
        w = self.weights
        S = states[1:]
        X, Y, vx, p = S[:, 0], S[:, 1], S[:, 2], S[:, 6]
        cx, cy, tx, ty = self.spline.eval_tangent(p)
        ex = X - cx
        ey = Y - cy
        d = ex * ex + ey * ey
        half_sq = w.corridor_half_width**2
        slack = np.maximum(0.0, d - half_sq)
        J = float(np.sum(w.q_s * slack * slack + w.q_d * d))
        dJ = np.zeros_like(states)
        wd = w.q_d + 2.0 * w.q_s * slack
        dJ[1:, 0] = 2.0 * ex * wd
        dJ[1:, 1] = 2.0 * ey * wd
        dJ[1:, 6] = -2.0 * (ex * tx + ey * ty) * wd
        if braking:
            J += float(np.sum(w.q_brake * vx * vx))
            dJ[1:, 2] = 2.0 * w.q_brake * vx
        else:
            J -= float(np.sum(w.q_vx * vx))
            dJ[1:, 2] = -w.q_vx
            if self.v_target is not None:
                over = np.maximum(0.0, vx - self.v_target)
                J += float(np.sum(w.q_vcap * over * over))
                dJ[1:, 2] += 2.0 * w.q_vcap * over
        return J, dJ

    def _input_cost(self, Z: np.ndarray):
        w = self.weights
        J = float(
            np.sum(w.q_phi * Z[:, 0] ** 2 + w.q_D * Z[:, 1] ** 2
                   - w.q_p * Z[:, 2])
        )
        dJ = np.empty_like(Z)
        dJ[:, 0] = 2.0 * w.q_phi * Z[:, 0]
        dJ[:, 1] = 2.0 * w.q_D * Z[:, 1]
        dJ[:, 2] = -w.q_p
        return J, dJ

    def _objective(self, s0: np.ndarray, z: np.ndarray, braking: bool):
        Z = z.reshape(-1, N_INPUT)
        states = _forward_pass(s0, Z, self.weights.dt, self._P)
        Js, _ = self._state_cost(states, braking)
        Ji, _ = self._input_cost(Z)
        return Js + Ji, states

    def _objective_grad(self, s0: np.ndarray, z: np.ndarray, braking: bool):
        Z = z.reshape(-1, N_INPUT)
        states, Fs, Gs = _forward_pass_jac(s0, Z, self.weights.dt, self._P)
        Js, dJs = self._state_cost(states, braking)
        Ji, dJi = self._input_cost(Z)
        grad = _backward_pass(Fs, Gs, dJs, dJi)
        return Js + Ji, grad.ravel(), states

    # -- solver ----------------------------------------------------------------

    def solve(
        self,
        x0: np.ndarray,
        u_prev: tuple[float, float] = (0.0, 0.0),
        braking: bool = False,
        max_iterations: int = 30,
    ) -> MpcSolution:
        """Minimize from plant state x0 = (X, Y, vx, vy, theta, omega, p)."""
        veh = self.vehicle
        s0 = np.empty(N_STATE)
        s0[:7] = np.asarray(x0, dtype=float)
        s0[7] = min(max(u_prev[0], -veh.delta_max), veh.delta_max)
        s0[8] = min(max(u_prev[1], -100.0), 100.0)
        if not np.all(np.isfinite(s0)):
            raise ValueError("non-finite MPC initial state")

        # hot start: previous plan shifted one stage; a fresh plan seeds the
        # progress rate from the current speed so the reference keeps pace
        z = self._z.reshape(-1, N_INPUT)
        if np.any(z):
            z = np.vstack([z[1:], z[-1:]]).ravel()
        else:
            z = z.copy()
            z[:, 2] = min(max(s0[2], 0.0), 15.0)
            z = z.ravel()
        z = _project(z, self._lb, self._ub)

        J, g, states = self._objective_grad(s0, z, braking)
        trace = [J]
        B = np.eye(z.size)
        kkt = float(np.max(np.abs(z - _project(z - g, self._lb, self._ub))))
        converged = kkt < self.kkt_tol
        it = 0
        while not converged and it < max_iterations:
            it += 1
            try:
                step = -np.linalg.solve(B, g)
            except np.linalg.LinAlgError:
                B = np.eye(z.size)
                step = -g
            improved = False
            g_inf = float(np.max(np.abs(g)))
            # steepest-descent fallback starts at a bound-width step so huge
            # gradients do not pin every backtracked trial to the box corner
            for direction, alpha in ((step, 1.0),
                                     (-g, min(1.0, 15.0 / max(g_inf, 1e-12)))):
                prev_try = None
                for _ in range(20):
                    z_try = _project(z + alpha * direction, self._lb, self._ub)
                    alpha *= 0.5
                    if prev_try is not None and np.array_equal(z_try, prev_try):
                        continue  # projection produced the same point
                    prev_try = z_try
                    dz = z_try - z
                    gdz = float(g @ dz)
                    if gdz < 0.0:
                        J_try, states_try = self._objective(s0, z_try, braking)
                        if J_try <= J + 1e-4 * gdz:
                            improved = True
                            break
                if improved:
                    break
            if not improved:
                break
            J_new, g_new, states = self._objective_grad(s0, z_try, braking)
            s = z_try - z
            y = g_new - g
            Bs = B @ s
            sBs = float(s @ Bs)
            sy = float(s @ y)
            if sBs > 1e-12:
                # Powell damping keeps the curvature update positive definite
                if sy < 0.2 * sBs:
                    theta = 0.8 * sBs / (sBs - sy)
                    y = theta * y + (1.0 - theta) * Bs
                    sy = float(s @ y)
                if sy > 1e-12:
                    B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            z, J, g = z_try, J_new, g_new
            trace.append(J)
            kkt = float(np.max(np.abs(z - _project(z - g, self._lb, self._ub))))
            converged = kkt < self.kkt_tol

        self._z = z.copy()
        Z = z.reshape(-1, N_INPUT)
        cmd = ControlCommand(
            steering=float(states[1, 7]),
            throttle=float(states[1, 8]),
            steering_rate=float(Z[0, 0]),
            throttle_rate=float(Z[0, 1]),
        )
        return MpcSolution(
            command=cmd,
            delta_u=Z.copy(),
            states=states,
            objective=J,
            iterations=it,
            kkt_residual=kkt,
            converged=converged,
            objective_trace=trace,
        )
