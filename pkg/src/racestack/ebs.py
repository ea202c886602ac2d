"""Pneumatic brake-circuit simulation and preflight verification.

The emergency brake hardware is two independent pneumatic circuits (front
and rear).  Each is modelled as an equivalent electric circuit: node
pressures are capacitor voltages (tank, manifold, junction, cylinder
chamber), connections are resistors (flow = dp / R), and the pressure
regulator and air cylinder are two-ports.  Integration is explicit Euler
with a stability guard.

A scripted check-up sequence (a declarative list of commands, waits, and
sensor assertions loaded from a data file) runs before releasing the car:
the autonomous variant exercises valves and verifies pressures, the manual
variant confirms the circuits are pressure-free.  Failure modes can be
injected per component to measure which combinations the sequence detects.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

from ._jit import maybe_njit

__all__ = [
    "ComponentKind",
    "Component",
    "PressureSensor",
    "FailureSpec",
    "IncompatibleMode",
    "UnstableStep",
    "PneumaticNetwork",
    "build_standard_network",
    "load_checkup_sequences",
    "CheckupOutcome",
    "CheckupVerdict",
    "run_checkup",
    "enumerate_failures",
    "CoverageReport",
    "coverage_report",
]


class ComponentKind(Enum):
    CONNECTION = "connection"
    TANK = "tank"
    REGULATOR = "regulator"
    ELECTRIC_VALVE = "electric_valve"
    MANUAL_VALVE = "manual_valve"
    SENSOR = "sensor"
    CYLINDER = "cylinder"


# valid failure modes per component kind
FAILURE_MODES = {
    ComponentKind.CONNECTION: (
        "large_leakage", "small_leakage", "partially_blocked", "blocked",
    ),
    ComponentKind.REGULATOR: (
        "no_regulation", "too_high", "too_low", "low_flow_rate",
    ),
    ComponentKind.ELECTRIC_VALVE: (
        "always_open", "always_closed", "no_reset_to_open",
    ),
    ComponentKind.MANUAL_VALVE: ("wrong_position",),
    ComponentKind.SENSOR: ("output_disconnected", "constant_output"),
    ComponentKind.CYLINDER: ("hydraulic_leakage", "wrong_transfer"),
}

# "constant wrong output (different levels)": enumerated stuck readings, bar
SENSOR_STUCK_LEVELS = (0.0, 2.5, 5.0, 7.5, 10.0)
DISCONNECTED_READING = 0.0


class IncompatibleMode(ValueError):
    """Failure mode does not apply to the component kind."""


class UnstableStep(RuntimeError):
    """Explicit Euler step exceeds the stability bound."""


@dataclass
class Component:
    """One circuit element; `failure` replaces its nominal behavior."""

    id: str
    kind: ComponentKind
    node_a: str = ""
    node_b: str = ""  # "" means atmosphere for vent paths
    resistance: float = 1.0
    setpoint: float = 0.0  # regulator output target, bar
    gain: float = 1.0  # cylinder pneumatic-to-hydraulic transfer
    commanded: str = "open"  # valves: commanded/positioned state
    seen_closed: bool = False  # electric valve reset latch
    failure: str | None = None
    failure_level: float = 0.0

    def effective_state(self) -> str:
        """Valve position after applying any injected failure."""
        if self.kind is ComponentKind.ELECTRIC_VALVE:
            if self.failure == "always_open":
                return "open"
            if self.failure == "always_closed":
                return "closed"
            if self.failure == "no_reset_to_open" and self.seen_closed:
                return "closed"
            return self.commanded
        if self.kind is ComponentKind.MANUAL_VALVE:
            if self.failure == "wrong_position":
                return "open" if self.commanded == "closed" else "closed"
            return self.commanded
        return self.commanded


@dataclass
class PressureSensor:
    """Reads a node pressure, through the cylinder two-port if attached."""

    id: str
    node: str
    via_cylinder: str | None = None
    failure: str | None = None
    failure_level: float = 0.0


@dataclass(frozen=True)
class FailureSpec:
    """A single component failure; sensors carry a stuck level."""

    component: str
    mode: str
    level: float = 0.0

    def label(self) -> str:
        if self.mode == "constant_output":
            return f"{self.component}:{self.mode}@{self.level:g}"
        return f"{self.component}:{self.mode}"


@maybe_njit
def _euler_kernel(p, vol, kinds, na, nb, coef, aux, dt, n_steps):
    """Forward-Euler integration of one valve phase; returns clamp count."""
    n = p.shape[0]
    m = kinds.shape[0]
    dp = np.zeros(n)
    clamped = 0
    for _ in range(n_steps):
        for i in range(n):
            dp[i] = 0.0
        for e in range(m):
            a = na[e]
            b = nb[e]
            if kinds[e] == 0:  # resistor, b < 0 is atmosphere
                pb = p[b] if b >= 0 else 0.0
                q = coef[e] * (p[a] - pb)
                dp[a] -= q
                if b >= 0:
                    dp[b] += q
            else:  # regulator: one-way flow toward min(p_a, setpoint)
                target = p[a] if p[a] < aux[e] else aux[e]
                q = coef[e] * (target - p[b])
                if q > 0.0:
                    dp[a] -= q
                    dp[b] += q
        for i in range(n):
            v = p[i] + dt * dp[i] / vol[i]
            if v < 0.0:
                v = 0.0
                clamped += 1
            p[i] = v
    return clamped


class PneumaticNetwork:
    """Node pressures plus components, advanced by explicit Euler steps."""

    def __init__(self, volumes: dict[str, float],
                 pressures: dict[str, float],
                 components: list[Component],
                 sensors: list[PressureSensor]):
        for name, v in volumes.items():
            if v <= 0.0:
                raise ValueError(f"volume of node {name} must be positive")
        self.node_names = list(volumes)
        self._index = {n: i for i, n in enumerate(self.node_names)}
        self.volumes = np.array([volumes[n] for n in self.node_names])
        self.pressures = np.array(
            [float(pressures.get(n, 0.0)) for n in self.node_names]
        )
        self.components = {c.id: c for c in components}
        self.sensors = {s.id: s for s in sensors}
        self.clamp_events = 0

    # -- construction helpers ------------------------------------------------

    def clone(self) -> "PneumaticNetwork":
        return copy.deepcopy(self)

    def remove_sensor(self, sensor_id: str) -> None:
        del self.sensors[sensor_id]

    # -- failure injection ---------------------------------------------------

    def inject(self, failures: list[FailureSpec]) -> None:
        for spec in failures:
            if spec.component in self.sensors:
                target_kind = ComponentKind.SENSOR
            elif spec.component in self.components:
                target_kind = self.components[spec.component].kind
            else:
                raise KeyError(f"unknown component {spec.component}")
            if spec.mode not in FAILURE_MODES[target_kind]:
                raise IncompatibleMode(
                    f"{spec.mode} does not apply to {target_kind.value}"
                )
            if target_kind is ComponentKind.SENSOR:
                s = self.sensors[spec.component]
                s.failure = spec.mode
                s.failure_level = spec.level
            else:
                c = self.components[spec.component]
                c.failure = spec.mode
                c.failure_level = spec.level

    # -- dynamics ------------------------------------------------------------

    def _edges(self):
        """Compile active components into flat edge arrays."""
        kinds, na, nb, coef, aux = [], [], [], [], []

        def add(kind, a, b, r, setpoint=0.0):
            if r == math.inf:
                return
            kinds.append(kind)
            na.append(self._index[a])
            nb.append(self._index[b] if b else -1)
            coef.append(1.0 / r)
            aux.append(setpoint)

        for c in self.components.values():
            if c.kind is ComponentKind.CONNECTION:
                r = c.resistance
                if c.failure == "blocked":
                    continue
                if c.failure == "partially_blocked":
                    r *= 10.0
                add(0, c.node_a, c.node_b, r)
                if c.failure == "large_leakage":
                    add(0, c.node_b, "", 30.0)
                elif c.failure == "small_leakage":
                    add(0, c.node_b, "", 300.0)
            elif c.kind is ComponentKind.REGULATOR:
                r = c.resistance
                setpoint = c.setpoint
                if c.failure == "no_regulation":
                    setpoint = 1e9  # passes tank pressure straight through
                elif c.failure == "too_high":
                    setpoint += 1.5
                elif c.failure == "too_low":
                    setpoint -= 1.5
                elif c.failure == "low_flow_rate":
                    r *= 10.0
                add(1, c.node_a, c.node_b, r, setpoint)
            elif c.kind is ComponentKind.ELECTRIC_VALVE:
                # 3/2 valve: open feeds the junction, closed vents it
                if c.effective_state() == "open":
                    add(0, c.node_a, c.node_b, c.resistance)
                else:
                    add(0, c.node_b, "", c.resistance)
            elif c.kind is ComponentKind.MANUAL_VALVE:
                if c.effective_state() == "open":
                    add(0, c.node_a, "", c.resistance)
            elif c.kind is ComponentKind.CYLINDER:
                if c.failure == "hydraulic_leakage":
                    add(0, c.node_a, "", 30.0)
        return (
            np.array(kinds, dtype=np.int64),
            np.array(na, dtype=np.int64),
            np.array(nb, dtype=np.int64),
            np.array(coef, dtype=float),
            np.array(aux, dtype=float),
        )

    def stability_bound(self) -> float:
        """Largest dt for which every node relaxation stays stable."""
        kinds, na, nb, coef, _ = self._edges()
        g = np.zeros(len(self.node_names))
        for e in range(len(kinds)):
            g[na[e]] += coef[e]
            if nb[e] >= 0:
                g[nb[e]] += coef[e]
        with np.errstate(divide="ignore"):
            tau = np.where(g > 0.0, self.volumes / np.maximum(g, 1e-300),
                           math.inf)
        return float(np.min(tau)) / 2.0

    def step(self, dt: float, n_steps: int = 1) -> None:
        if dt > self.stability_bound():
            raise UnstableStep(
                f"dt={dt:g} exceeds stability bound {self.stability_bound():g}"
            )
        kinds, na, nb, coef, aux = self._edges()
        self.clamp_events += int(
            _euler_kernel(self.pressures, self.volumes, kinds, na, nb, coef,
                          aux, dt, n_steps)
        )

    # -- interface -----------------------------------------------------------

    def command(self, component_id: str, state: str) -> None:
        c = self.components[component_id]
        if c.kind not in (ComponentKind.ELECTRIC_VALVE,
                          ComponentKind.MANUAL_VALVE):
            raise ValueError(f"{component_id} is not a commandable valve")
        c.commanded = state
        if state == "closed" and c.kind is ComponentKind.ELECTRIC_VALVE:
            c.seen_closed = True

    def node_pressure(self, node: str) -> float:
        return float(self.pressures[self._index[node]])

    def read(self, sensor_id: str) -> float:
        s = self.sensors[sensor_id]
        if s.failure == "output_disconnected":
            return DISCONNECTED_READING
        if s.failure == "constant_output":
            return s.failure_level
        value = self.node_pressure(s.node)
        if s.via_cylinder is not None:
            cyl = self.components[s.via_cylinder]
            gain = cyl.gain
            if cyl.failure == "wrong_transfer":
                gain *= 0.5
            value *= gain
        return value

    def total_mass(self) -> float:
        """Conserved quantity when no path to atmosphere is open."""
        return float(np.dot(self.volumes, self.pressures))

    def set_preset(self, preset: str, tank_pressure: float = 8.0,
                   manifold_pressure: float = 6.0) -> None:
        """Initialize pressures: vented, pressurized tanks only
        (pressurized_cold), or tanks plus manifolds (pressurized).  A
        ':<prefix>' suffix limits the preset to one circuit, e.g.
        'pressurized:f' leaves the rear circuit vented."""
        base, _, prefix = preset.partition(":")
        if base not in ("vented", "pressurized", "pressurized_cold"):
            raise ValueError(f"unknown preset {preset!r}")
        self.pressures[:] = 0.0
        if base == "vented":
            return
        for name in self.node_names:
            if prefix and not name.startswith(prefix + "_"):
                continue
            if name.endswith("_tank"):
                self.pressures[self._index[name]] = tank_pressure
            elif base == "pressurized" and name.endswith("_manifold"):
                self.pressures[self._index[name]] = manifold_pressure


def build_standard_network(params: dict | None = None) -> PneumaticNetwork:
    """Two independent circuits; parameters come from the shipped data file."""
    if params is None:
        with resources.files("racestack.data").joinpath(
                "ebs_circuit.json").open() as f:
            params = json.load(f)
    volumes: dict[str, float] = {}
    pressures: dict[str, float] = {}
    components: list[Component] = []
    sensors: list[PressureSensor] = []
    for side in ("f", "r"):
        tank = f"{side}_tank"
        manifold = f"{side}_manifold"
        junction = f"{side}_junction"
        chamber = f"{side}_chamber"
        volumes[tank] = params["tank_volume"]
        volumes[manifold] = params["manifold_volume"]
        volumes[junction] = params["junction_volume"]
        volumes[chamber] = params["chamber_volume"]
        pressures[tank] = 0.0
        components += [
            Component(f"{side}_regulator", ComponentKind.REGULATOR,
                      tank, manifold, resistance=params["regulator_resistance"],
                      setpoint=params["regulator_setpoint"]),
            Component(f"{side}_brake_valve", ComponentKind.ELECTRIC_VALVE,
                      manifold, junction, resistance=params["valve_resistance"],
                      commanded="open"),
            Component(f"{side}_supply_line", ComponentKind.CONNECTION,
                      junction, chamber, resistance=params["line_resistance"]),
            Component(f"{side}_vent_valve", ComponentKind.MANUAL_VALVE,
                      tank, "", resistance=params["vent_resistance"],
                      commanded="closed"),
            Component(f"{side}_cylinder", ComponentKind.CYLINDER,
                      chamber, "", gain=params["cylinder_gain"]),
        ]
        # the tank is supervised by two sensors: one directly on it, one on
        # the manifold behind the mandatory regulator
        sensors += [
            PressureSensor(f"{side}_tank_sensor", tank),
            PressureSensor(f"{side}_manifold_sensor", manifold),
            PressureSensor(f"{side}_brake_sensor", chamber,
                           via_cylinder=f"{side}_cylinder"),
        ]
    return PneumaticNetwork(volumes, pressures, components, sensors)


# -- check-up sequences ------------------------------------------------------


class CheckupOutcome(Enum):
    READY_AUTONOMOUS = "ready_autonomous"
    READY_MANUAL = "ready_manual"
    FAULT = "fault"


@dataclass
class CheckupVerdict:
    outcome: CheckupOutcome
    fault_step: int | None = None
    fault_label: str | None = None
    trace: list[tuple[float, dict[str, float]]] = field(default_factory=list)


def load_checkup_sequences() -> dict:
    with resources.files("racestack.data").joinpath(
            "ebs_checkup.json").open() as f:
        return json.load(f)


def run_checkup(network: PneumaticNetwork, sequence: dict,
                dt: float = 1e-3, preset: str | None = None,
                tank_pressure: float = 8.0) -> CheckupVerdict:
    """Execute one scripted sequence; the first failed assert is the verdict.

    Assertions on sensors absent from the network are skipped, so removing
    a sensor can only shrink the set of detectable failures.
    """
    net = network.clone()
    net.set_preset(preset if preset is not None else sequence["initial"],
                   tank_pressure=tank_pressure)
    ready = (CheckupOutcome.READY_MANUAL if sequence["mode"] == "manual"
             else CheckupOutcome.READY_AUTONOMOUS)
    recorded: dict[str, float] = {}
    trace: list[tuple[float, dict[str, float]]] = []
    t = 0.0

    def snapshot():
        return {sid: net.read(sid) for sid in net.sensors}

    for idx, step in enumerate(sequence["steps"]):
        op = step["op"]
        if op == "wait":
            n = max(1, int(round(step["seconds"] / dt)))
            net.step(dt, n_steps=n)
            t += n * dt
            trace.append((t, snapshot()))
        elif op == "command":
            for cid, state in step["targets"].items():
                net.command(cid, state)
        elif op == "record":
            if step["sensor"] in net.sensors:
                recorded[step["key"]] = net.read(step["sensor"])
        elif op == "assert":
            sid = step["sensor"]
            if sid not in net.sensors:
                continue
            value = net.read(sid)
            lo = step.get("min", -math.inf)
            hi = step.get("max", math.inf)
            if not (lo <= value <= hi):
                return CheckupVerdict(CheckupOutcome.FAULT, idx,
                                      step["label"], trace)
        elif op == "assert_drop":
            sid = step["sensor"]
            if sid not in net.sensors or step["key"] not in recorded:
                continue
            drop = recorded[step["key"]] - net.read(sid)
            if drop > step["max_drop"]:
                return CheckupVerdict(CheckupOutcome.FAULT, idx,
                                      step["label"], trace)
        else:
            raise ValueError(f"unknown sequence op {op!r}")
    return CheckupVerdict(ready, trace=trace)


# -- failure enumeration and coverage ----------------------------------------


def enumerate_failures(network: PneumaticNetwork) -> list[FailureSpec]:
    """Every injectable single failure, stuck sensors at each level."""
    specs: list[FailureSpec] = []
    for c in network.components.values():
        for mode in FAILURE_MODES.get(c.kind, ()):
            specs.append(FailureSpec(c.id, mode))
    for s in network.sensors.values():
        specs.append(FailureSpec(s.id, "output_disconnected"))
        for level in SENSOR_STUCK_LEVELS:
            specs.append(FailureSpec(s.id, "constant_output", level))
    return specs


@dataclass
class CoverageReport:
    max_simultaneous: int
    per_size: dict[int, dict]

    def to_dict(self) -> dict:
        return {
            "max_simultaneous": self.max_simultaneous,
            "per_size": {
                str(k): {
                    "total_combinations": v["total_combinations"],
                    "evaluated": v["evaluated"],
                    "sampled": v["sampled"],
                    "detected": v["detected"],
                    "detected_fraction": v["detected_fraction"],
                    "undetected": [
                        [s.label() for s in combo]
                        for combo in v["undetected"]
                    ],
                    "manual_hazards": [
                        [s.label() for s in combo]
                        for combo in v["manual_hazards"]
                    ],
                }
                for k, v in self.per_size.items()
            },
        }


def _evaluate_combo(network, combo, sequences, dt):
    """(detected, manual_hazard) for one failure combination."""
    def faulted(seq, preset, tank_pressure=8.0):
        net = network.clone()
        net.inject(list(combo))
        return run_checkup(net, seq, dt=dt, preset=preset,
                           tank_pressure=tank_pressure)

    auto = faulted(sequences["autonomous"], "pressurized_cold")
    manual = faulted(sequences["manual"], "vented")
    detected = (auto.outcome is CheckupOutcome.FAULT
                or manual.outcome is CheckupOutcome.FAULT)
    # hazard: manual mode releases the car while a tank still holds
    # pressure; each circuit is checked against the forgotten-vent state
    hazard = False
    for prefix in ("f", "r"):
        run = faulted(sequences["manual"], f"pressurized:{prefix}")
        if run.outcome is CheckupOutcome.READY_MANUAL:
            hazard = True
    return detected, hazard


def coverage_report(network: PneumaticNetwork, max_simultaneous: int,
                    budget: int = 2500, seed: int = 0,
                    sequences: dict | None = None,
                    dt: float = 1e-3) -> CoverageReport:
    """Detection fractions for all failure combinations up to a size bound.

    Sizes whose combination count exceeds the budget are sampled with a
    seeded generator instead of enumerated.
    """
    if not 1 <= max_simultaneous <= 3:
        raise ValueError("max_simultaneous must be 1..3")
    if sequences is None:
        sequences = load_checkup_sequences()
    specs = enumerate_failures(network)
    rng = np.random.default_rng(seed)
    per_size: dict[int, dict] = {}
    for k in range(1, max_simultaneous + 1):
        combos = [
            c for c in itertools.combinations(specs, k)
            if len({s.component for s in c}) == k
        ]
        total = len(combos)
        sampled = total > budget
        if sampled:
            idx = rng.choice(total, size=budget, replace=False)
            combos = [combos[i] for i in sorted(idx)]
        undetected, hazards = [], []
        for combo in combos:
            detected, hazard = _evaluate_combo(network, combo, sequences, dt)
            if not detected:
                undetected.append(combo)
            if hazard:
                hazards.append(combo)
        per_size[k] = {
            "total_combinations": total,
            "evaluated": len(combos),
            "sampled": sampled,
            "detected": len(combos) - len(undetected),
            "detected_fraction":
                (len(combos) - len(undetected)) / max(1, len(combos)),
            "undetected": undetected,
            "manual_hazards": hazards,
        }
    return CoverageReport(max_simultaneous, per_size)
