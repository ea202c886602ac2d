"""Deterministic closed-loop simulation harness.

Everything needed to exercise the full stack end to end: track synthesis,
ground-truth vehicle integration, sensor emulation with configurable noise
and outage windows, the 20 Hz mission loop, and telemetry output.
"""

from .tracks import (
    GenerationFailed,
    PolylineProgress,
    TrackConfig,
    TrackDefinition,
    generate_track,
)
from .world import World, WorldConfig
from .sensors import NoiseConfig, Outage, SensorFrame, SensorRig, parse_outage
from .telemetry import (
    TELEMETRY_COLUMNS,
    TelemetryRecord,
    TelemetryWriter,
    read_telemetry,
    telemetry_metrics,
    write_map_json,
)
from .mission import MissionConfig, MissionResult, run_mission

__all__ = [
    "GenerationFailed",
    "PolylineProgress",
    "TrackConfig",
    "TrackDefinition",
    "generate_track",
    "World",
    "WorldConfig",
    "NoiseConfig",
    "Outage",
    "SensorFrame",
    "SensorRig",
    "parse_outage",
    "TELEMETRY_COLUMNS",
    "TelemetryRecord",
    "TelemetryWriter",
    "read_telemetry",
    "telemetry_metrics",
    "write_map_json",
    "MissionConfig",
    "MissionResult",
    "run_mission",
]
