"""Telemetry output and replay.

One CSV row per control tick with a fixed column set, plus a JSON snapshot
of the final landmark map. All numbers are written through one fixed
format, and the solver-time column defaults to zero, so two runs with the
same seed and configuration produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

TELEMETRY_COLUMNS = (
    "t",
    "X_true",
    "Y_true",
    "psi_true",
    "vx_true",
    "vy_true",
    "r_true",
    "X_est",
    "Y_est",
    "psi_est",
    "vx_est",
    "vy_est",
    "r_est",
    "n_eff",
    "map_size",
    "centerline_len",
    "delta_cmd",
    "D_cmd",
    "slack_max",
    "solve_ms",
    "corridor_violation_m",
)


@dataclass(slots=True)
class TelemetryRecord:
    t: float
    X_true: float
    Y_true: float
    psi_true: float
    vx_true: float
    vy_true: float
    r_true: float
    X_est: float
    Y_est: float
    psi_est: float
    vx_est: float
    vy_est: float
    r_est: float
    n_eff: float
    map_size: int
    centerline_len: float
    delta_cmd: float
    D_cmd: float
    slack_max: float
    solve_ms: float = 0.0
    corridor_violation_m: float = 0.0

    def row(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            parts.append(str(int(v)) if f.name == "map_size" else f"{v:.9g}")
        return ",".join(parts)


assert tuple(f.name for f in fields(TelemetryRecord)) == TELEMETRY_COLUMNS


class TelemetryWriter:
    """Streams records to disk; the header goes out on open."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(TELEMETRY_COLUMNS) + "\n")
        self.rows = 0

    def write(self, rec: TelemetryRecord) -> None:
        self._fh.write(rec.row() + "\n")
        self.rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self) -> "TelemetryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_map_json(path: str | Path, cones) -> None:
    """Landmark map snapshot: position, color, quality, packed covariance."""
    payload = []
    for c in cones:
        cov = np.asarray(c.cov)
        payload.append(
            {
                "x": float(c.position[0]),
                "y": float(c.position[1]),
                "color": c.color.name.lower(),
                "quality": float(c.quality),
                "cov": [float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1])],
            }
        )
    Path(path).write_text(
        json.dumps({"cones": payload}, indent=1) + "\n", encoding="utf-8"
    )


def read_telemetry(path: str | Path) -> dict[str, np.ndarray]:
    """Load a telemetry CSV back into column arrays; header is validated."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text:
        raise ValueError("empty telemetry file")
    header = tuple(text[0].split(","))
    if header != TELEMETRY_COLUMNS:
        raise ValueError(f"unexpected telemetry header {header!r}")
    if len(text) == 1:
        return {k: np.array([]) for k in TELEMETRY_COLUMNS}
    data = np.loadtxt(text[1:], delimiter=",", ndmin=2)
    if data.shape[1] != len(TELEMETRY_COLUMNS):
        raise ValueError("telemetry row width does not match header")
    return {k: data[:, i] for i, k in enumerate(TELEMETRY_COLUMNS)}


def telemetry_metrics(data: dict[str, np.ndarray]) -> dict:
    """Summary statistics used by the replay command and acceptance checks."""
    t = data["t"]
    if t.size == 0:
        raise ValueError("telemetry holds no rows")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("timestamps are not strictly increasing")
    err = np.hypot(data["X_true"] - data["X_est"], data["Y_true"] - data["Y_est"])
    return {
        "ticks": int(t.size),
        "duration_s": float(t[-1] - t[0]),
        "peak_speed_kmh": float(np.max(data["vx_true"]) * 3.6),
        "pose_rms_m": float(np.sqrt(np.mean(err**2))),
        "max_corridor_violation_m": float(np.max(data["corridor_violation_m"])),
        "mean_solve_ms": float(np.mean(data["solve_ms"])),
        "final_map_size": int(data["map_size"][-1]),
    }
