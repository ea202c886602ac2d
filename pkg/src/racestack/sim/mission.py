"""Closed-loop mission execution.

One 20 Hz loop wires the whole stack together: sense, estimate, map,
plan, solve, actuate. Mission flavors differ only in how the reference
path appears (fixed layouts for the two known-geometry events, per-tick
gate detection while mapping, one frozen loop once the map is locked) and
in when the run counts as finished.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from ..centerline import CenterlineError, detect_centerline, hardcoded_centerline
from ..core import Pose2, RngStream, Twist2
from ..estimation import Ekf, EstimationError, STATE_DIM
from ..mpc import MpcSolver
from ..slam import FastSlam, SlamError
from ..spline import CenterlineSpline, resample_polyline, track_progress_correction
from .sensors import Outage, SensorRig
from .telemetry import TelemetryRecord, TelemetryWriter, write_map_json
from .tracks import PolylineProgress, generate_track
from .world import World, WorldConfig

if TYPE_CHECKING:  # pragma: no cover
    from ..config import StackConfig

MISSIONS = ("acceleration", "skidpad", "autocross", "trackdrive")


@dataclass
class MissionConfig:
    """Mission-loop behavior: speed policy, budgets, and termination."""

    mpc_iterations: int = 10
    mpc_kkt_tol: float = 2e-3  # in-loop tolerance; unit solves use tighter
    v_cap_skidpad: float = 5.0  # 18 km/h, inside the 15-20 km/h band
    v_cap_trackdrive: float = 8.33  # 30 km/h
    v_mapping: float = 6.0  # first sight of the track: drive conservatively
    laps_autocross: int = 1
    laps_trackdrive: int = 2
    abort_violation: float = 1.5
    timeout_acceleration: float = 30.0
    timeout_skidpad: float = 120.0
    timeout_autocross: float = 180.0
    timeout_trackdrive: float = 300.0
    particles_acceleration: int = 250
    particles_skidpad: int = 240
    particles_autocross: int = 320
    particles_trackdrive: int = 320
    map_gates: int = 14  # lookahead gates per replanning pass
    loop_gates: int = 200  # gate budget when extracting the full lap

    def timeout(self, mission: str) -> float:
        return getattr(self, f"timeout_{mission}")

    def particles(self, mission: str) -> int:
        return getattr(self, f"particles_{mission}")

    def speed_cap(self, mission: str) -> float | None:
        if mission == "acceleration":
            return None
        if mission == "skidpad":
            return self.v_cap_skidpad
        return self.v_mapping

    def laps(self, mission: str) -> int:
        if mission == "autocross":
            return self.laps_autocross
        if mission == "trackdrive":
            return self.laps_trackdrive
        return 1


@dataclass
class MissionResult:
    mission: str
    seed: int
    completed: bool
    reason: str
    t_final: float
    ticks: int
    lap_times: list[float]
    peak_speed_kmh: float
    max_corridor_violation_m: float
    pose_rms_m: float
    pose_rms_mcl_m: float | None
    telemetry_path: str
    map_path: str

    def to_dict(self) -> dict:
        return asdict(self)


class _Planner:
    """Owns the reference spline, the progress estimate, and the solver."""

    def __init__(
        self,
        mission: str,
        stack: "StackConfig",
        v_target: float | None,
    ):
        self.mission = mission
        self.cfg = stack.mission
        self.fixed = mission in ("acceleration", "skidpad")
        self.frozen_loop = False
        self._replanned = False
        self.spline: CenterlineSpline | None = None
        self.p = 0.0
        if self.fixed:
            centers = hardcoded_centerline(mission).centers
            pts = resample_polyline(centers, 4.0)
            self.spline = CenterlineSpline(pts, closed=False)
        self.solver = MpcSolver(
            self.spline or _straight_spline(Pose2(0.0, 0.0, 0.0)),
            weights=stack.mpc,
            vehicle=stack.vehicle,
            v_target=v_target,
            kkt_tol=self.cfg.mpc_kkt_tol,
        )
        if self.spline is not None:
            self.solver.update_spline(self.spline)

    # -- per-tick reference maintenance ------------------------------------

    def update(self, pose: Pose2, slam: FastSlam, dt: float, vx: float) -> None:
        if self.fixed or self.frozen_loop:
            self.p = track_progress_correction(
                pose.xy, self.spline, self.p + max(vx, 0.0) * dt, bracket=6.0
            )
            return
        if not self._replan(pose, slam) and self.spline is None:
            self.spline = _straight_spline(pose)
            self.solver.update_spline(self.spline)
            self.p = 0.0
        elif self.spline is not None and not self._replanned:
            # keep tracking the stale spline until detection recovers
            self.p = track_progress_correction(
                pose.xy, self.spline, self.p + max(vx, 0.0) * dt, bracket=6.0
            )

    def _replan(self, pose: Pose2, slam: FastSlam) -> bool:
        """Refresh the spline from the current landmark map."""
        self._replanned = False
        try:
            path = detect_centerline(
                slam.map_snapshot(), pose, max_gates=self.cfg.map_gates
            )
        except CenterlineError:
            return False
        centers = path.centers
        head = np.array([math.cos(pose.psi), math.sin(pose.psi)])
        while len(centers) and float((centers[0] - pose.xy) @ head) < 0.5:
            centers = centers[1:]
        if len(centers) < 3:
            return False
        pts = resample_polyline(np.vstack([pose.xy[None, :], centers]), 4.0)
        if len(pts) < 2:
            return False
        self.spline = CenterlineSpline(pts, closed=False)
        self.solver.update_spline(self.spline)
        self.p = track_progress_correction(pose.xy, self.spline, 0.0, bracket=8.0)
        self._replanned = True
        return True

    def enter_localization(self, pose: Pose2, slam: FastSlam, v_target: float) -> None:
        """Map is frozen: try to extract the whole lap as one closed spline."""
        self.solver.v_target = v_target
        try:
            path = detect_centerline(
                slam.map_snapshot(), pose, max_gates=self.cfg.loop_gates
            )
        except CenterlineError:
            return  # fall back to rolling replanning on the frozen map
        centers = _truncate_loop(path.centers)
        if centers is None:
            return
        pts = resample_polyline(centers, 4.0, closed=True)
        self.spline = CenterlineSpline(pts, closed=True)
        self.solver.update_spline(self.spline)
        self.p = track_progress_correction(pose.xy, self.spline, 0.0, bracket=12.0)
        self.frozen_loop = True

    def slack_max(self, states: np.ndarray) -> float:
        """Largest corridor slack along the predicted trajectory [m^2]."""
        w = self.solver.weights
        p = states[1:, 6]
        cx, cy = self.spline.eval(p)
        d2 = (states[1:, 0] - cx) ** 2 + (states[1:, 1] - cy) ** 2
        return float(np.max(np.maximum(0.0, d2 - w.corridor_half_width**2)))


def _truncate_loop(
    centers: np.ndarray, close_tol: float = 6.0, min_arc: float = 30.0
) -> np.ndarray | None:
    """Cut a gate-center chain at its first return to the start, or None.

    The beam search keeps no memory of visited gates, so on a closed circuit
    it laps the track until the gate budget runs out. The usable reference
    is the prefix ending where the chain first re-enters the start region
    after a non-trivial arc; anything longer overlays drifting repeats.
    """
    if len(centers) < 8:
        return None
    arc = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(centers, axis=0), axis=1))]
    )
    d0 = np.linalg.norm(centers - centers[0], axis=1)
    hits = np.flatnonzero((arc >= min_arc) & (d0 <= close_tol))
    if hits.size == 0 or hits[0] + 1 < 8:
        return None
    return centers[: hits[0] + 1]


def _straight_spline(pose: Pose2, length: float = 24.0) -> CenterlineSpline:
    """Dead-ahead fallback reference for the first mapping ticks."""
    s = np.arange(0.0, length + 1e-9, 4.0)
    pts = pose.xy[None, :] + s[:, None] * np.array(
        [[math.cos(pose.psi), math.sin(pose.psi)]]
    )
    return CenterlineSpline(pts, closed=False)


def run_mission(
    mission: str,
    seed: int,
    out_dir: str | Path,
    config: "StackConfig | None" = None,
    gnss_outage: Outage | None = None,
    gss_outage: Outage | None = None,
    profile: bool = False,
) -> MissionResult:
    """Execute one mission and write telemetry, map, and result files.

    The run is fully determined by (mission, seed, config, outages):
    every random draw comes from children of one seeded stream and, unless
    ``profile`` is set, no wall-clock value reaches the outputs.
    """
    if mission not in MISSIONS:
        raise ValueError(f"unknown mission {mission!r}")
    if config is None:
        from ..config import StackConfig

        config = StackConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    root = RngStream(seed)
    track = generate_track(mission, root.child(1), config.track)
    world_cfg = replace(config.world)
    world = World(track.start, world_cfg)
    rig = SensorRig(
        track,
        config.noise,
        root.child(2),
        gss_offset=config.estimation.gss_offset,
        gnss_outage=gnss_outage,
        gss_outage=gss_outage,
    )

    x0 = np.zeros(STATE_DIM)
    x0[0], x0[1], x0[2] = track.start.x, track.start.y, track.start.psi
    p0 = np.diag([0.01, 0.01, 0.002, 0.01, 0.01, 0.002, 0.1, 0.1])
    ekf = Ekf(x0, p0, config.estimation)

    slam_cfg = replace(
        config.slam, n_particles=config.mission.particles(mission)
    )
    slam = FastSlam.init_mission(mission, slam_cfg, root.child(3), track.start)

    mission_cfg = config.mission
    planner = _Planner(mission, config, mission_cfg.speed_cap(mission))

    dt = world_cfg.tick_dt
    tracker = PolylineProgress(track.centerline, closed=track.closed)
    half_width = config.mpc.corridor_half_width
    laps_needed = mission_cfg.laps(mission)
    timeout = mission_cfg.timeout(mission)
    max_ticks = int(math.ceil(timeout / dt))

    telemetry_path = out / "telemetry.csv"
    map_path = out / "map.json"
    writer = TelemetryWriter(telemetry_path)

    s_mod = 0.0
    lap_count = 0
    lap_times: list[float] = []
    lap_start_t = 0.0
    frozen = False
    u_prev = (0.0, 0.0)
    peak_vx = 0.0
    max_violation = 0.0
    err_sq_sum = 0.0
    err_sq_mcl = 0.0
    n_mcl = 0
    completed = False
    reason = "timeout"
    t = 0.0

    try:
        for tick in range(max_ticks):
            t = tick * dt
            pose_true = world.pose
            twist_true = world.twist

            # truth-side scoring and termination
            s_new, d_lat = tracker.project(pose_true.xy, s_mod)
            if track.closed:
                step_s = s_new - s_mod
                if step_s < -track.length / 2.0:
                    lap_count += 1
                elif step_s > track.length / 2.0:
                    lap_count -= 1
            s_mod = s_new
            total_s = lap_count * track.length + s_mod
            violation = max(0.0, d_lat - half_width)
            max_violation = max(max_violation, violation)
            peak_vx = max(peak_vx, twist_true.vx)

            if violation > mission_cfg.abort_violation:
                reason = "off_track"
                break
            if track.closed:
                while len(lap_times) < min(lap_count, laps_needed):
                    lap_times.append(t - lap_start_t)
                    lap_start_t = t
                if mission == "trackdrive" and lap_count >= 1 and not frozen:
                    slam.freeze_map()
                    frozen = True
                    planner.enter_localization(
                        slam.estimate(), slam, mission_cfg.v_cap_trackdrive
                    )
                if lap_count >= laps_needed:
                    completed = True
                    reason = "finished"
                    break
            else:
                if s_mod >= track.finish_s:
                    completed = True
                    reason = "finished"
                    if not lap_times:
                        lap_times.append(t)
                    break

            # estimation; the fused EKF pose (not the raw fix) anchors the
            # particle cloud, so its strength tracks the filter's actual
            # confidence and decays on its own during outages
            frame = rig.sense(world, t)
            ekf.step(dt, frame.status, frame.measurements)
            vx_e, vy_e, r_e = ekf.twist
            ekf_pose = ekf.pose
            anchor_sigmas = np.sqrt(np.diag(ekf.P)[:3])
            diag = slam.step(
                Twist2(vx_e, vy_e, r_e),
                dt,
                frame.cones,
                gnss_pose=Pose2(ekf_pose[0], ekf_pose[1], ekf_pose[2]),
                gnss_sigmas=anchor_sigmas,
            )
            pose_est = slam.estimate()

            # plan and solve
            planner.update(pose_est, slam, dt, vx_e)
            x_mpc = np.array(
                [pose_est.x, pose_est.y, vx_e, vy_e, pose_est.psi, r_e, planner.p]
            )
            t_solve = time.perf_counter() if profile else 0.0
            sol = planner.solver.solve(
                x_mpc, u_prev=u_prev, max_iterations=mission_cfg.mpc_iterations
            )
            solve_ms = (time.perf_counter() - t_solve) * 1e3 if profile else 0.0
            cmd = sol.command
            u_prev = (cmd.steering, cmd.throttle)

            err_sq = (pose_true.x - pose_est.x) ** 2 + (
                pose_true.y - pose_est.y
            ) ** 2
            err_sq_sum += err_sq
            if frozen:
                err_sq_mcl += err_sq
                n_mcl += 1

            writer.write(
                TelemetryRecord(
                    t=t,
                    X_true=pose_true.x,
                    Y_true=pose_true.y,
                    psi_true=pose_true.psi,
                    vx_true=twist_true.vx,
                    vy_true=twist_true.vy,
                    r_true=twist_true.r,
                    X_est=pose_est.x,
                    Y_est=pose_est.y,
                    psi_est=pose_est.psi,
                    vx_est=vx_e,
                    vy_est=vy_e,
                    r_est=r_e,
                    n_eff=diag.n_eff,
                    map_size=diag.map_size,
                    centerline_len=planner.spline.length,
                    delta_cmd=cmd.steering,
                    D_cmd=cmd.throttle,
                    slack_max=planner.slack_max(sol.states),
                    solve_ms=solve_ms,
                    corridor_violation_m=violation,
                )
            )

            world.step(cmd.steering, cmd.throttle)
    except (EstimationError, SlamError) as exc:
        reason = f"estimator_fault: {exc}"
        completed = False
    finally:
        writer.close()

    write_map_json(map_path, slam.map_snapshot())
    result = MissionResult(
        mission=mission,
        seed=seed,
        completed=completed,
        reason=reason,
        t_final=t,
        ticks=writer.rows,
        lap_times=[float(x) for x in lap_times],
        peak_speed_kmh=float(peak_vx * 3.6),
        max_corridor_violation_m=float(max_violation),
        pose_rms_m=math.sqrt(err_sq_sum / max(writer.rows, 1)),
        pose_rms_mcl_m=math.sqrt(err_sq_mcl / n_mcl) if n_mcl else None,
        telemetry_path=str(telemetry_path),
        map_path=str(map_path),
    )
    (out / "result.json").write_text(
        json.dumps(result.to_dict(), indent=1) + "\n", encoding="utf-8"
    )
    return result
