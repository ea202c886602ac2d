"""Configuration: typed defaults plus a YAML overlay.

Every tunable in the stack lives in one of the section dataclasses below;
a config file only ever overrides fields that already exist. Unknown
sections, unknown keys, and values that cannot be coerced to the field's
type raise ConfigError, so a typo fails loudly instead of silently running
with defaults.

Example file::

    mpc:
      horizon: 30
      q_s: 200.0
    mission:
      v_mapping: 5.0
    world:
      command_latency_ticks: 1
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from .estimation import EkfConfig
from .mpc import MpcWeights
from .sim.mission import MissionConfig
from .sim.sensors import NoiseConfig
from .sim.tracks import TrackConfig
from .sim.world import WorldConfig
from .slam import SlamConfig
from .vehicle import VehicleParams


class ConfigError(Exception):
    """Unusable configuration input."""


@dataclass
class StackConfig:
    """Every tunable of the full stack, one dataclass per subsystem."""

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    estimation: EkfConfig = field(default_factory=EkfConfig)
    slam: SlamConfig = field(default_factory=SlamConfig)
    mpc: MpcWeights = field(default_factory=MpcWeights)
    mission: MissionConfig = field(default_factory=MissionConfig)
    track: TrackConfig = field(default_factory=TrackConfig)


# the "truth" section retargets the plant model nested inside `world`
_SECTION_ALIASES = {"truth": ("world", "vehicle")}


def _coerce(name: str, current, value):
    """Convert a YAML scalar/list to the type the field already holds."""
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)) and len(value) == len(current):
            return tuple(
                _coerce(f"{name}[{i}]", c, v) for i, (c, v) in
                enumerate(zip(current, value))
            )
        raise ConfigError(
            f"{name}: expected a {len(current)}-element list, got {value!r}"
        )
    if isinstance(current, np.ndarray):
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: expected a numeric list") from exc
        if arr.shape != current.shape:
            raise ConfigError(
                f"{name}: expected shape {current.shape}, got {arr.shape}"
            )
        return arr
    if isinstance(current, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    raise ConfigError(f"{name}: field type cannot be set from a config file")


def _apply(obj, mapping: dict, section: str) -> None:
    names = {f.name for f in fields(obj)}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        current = getattr(obj, key)
        if is_dataclass(current):
            raise ConfigError(
                f"{section}.{key} is a nested section; use its own table"
            )
        setattr(obj, key, _coerce(f"{section}.{key}", current, value))
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        try:
            post()
        except ValueError as exc:
            raise ConfigError(f"section {section}: {exc}") from exc


def load_config(path: str | Path | None = None) -> StackConfig:
    """Defaults, optionally overlaid with a YAML file."""
    cfg = StackConfig()
    if path is None:
        return cfg
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
    if data is None:
        return cfg
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping of sections")

    section_names = {f.name for f in fields(cfg)}
    for section, mapping in data.items():
        if not isinstance(mapping, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        if section in _SECTION_ALIASES:
            outer, inner = _SECTION_ALIASES[section]
            target = getattr(getattr(cfg, outer), inner)
        elif section in section_names:
            target = getattr(cfg, section)
        else:
            raise ConfigError(f"unknown config section {section!r}")
        _apply(target, mapping, section)
    return cfg
