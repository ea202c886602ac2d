"""Command-line entry point.

Three subcommands:

* ``run``        -- execute one mission in the simulator and write telemetry
* ``ebs-verify`` -- enumerate brake-circuit failure combinations
* ``replay``     -- recompute summary metrics from a telemetry file

Exit codes: 0 when the requested work completed (mission finished,
verification clean, replay parsed), 2 when the run or verification failed
on its own terms, 3 for configuration problems.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .ebs import build_standard_network, coverage_report, load_checkup_sequences

EXIT_OK = 0
EXIT_FAILED = 2
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are configuration errors, not runtime failures."""

    def error(self, message: str) -> None:  # noqa: A003 - argparse API
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _build_parser() -> _Parser:
    parser = _Parser(prog="racestack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one mission closed loop")
    run.add_argument(
        "--mission",
        required=True,
        choices=["acceleration", "skidpad", "autocross", "trackdrive"],
    )
    run.add_argument("--seed", type=int, required=True)
    run.add_argument("--config", default=None, help="YAML overrides")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument(
        "--gnss-outage", default=None, metavar="START:END", help="seconds"
    )
    run.add_argument(
        "--gss-outage", default=None, metavar="START:END", help="seconds"
    )
    run.add_argument(
        "--profile",
        action="store_true",
        help="record real solver times (breaks byte-level determinism)",
    )

    ebs = sub.add_parser("ebs-verify", help="brake-circuit failure sweep")
    ebs.add_argument("--max-failures", type=int, required=True, metavar="K")
    ebs.add_argument("--circuit", default=None, help="circuit parameter JSON")
    ebs.add_argument("--sequence", default=None, help="checkup sequence JSON")
    ebs.add_argument("--out", required=True, help="report JSON path")
    ebs.add_argument("--budget", type=int, default=2500)
    ebs.add_argument("--seed", type=int, default=0)

    rep = sub.add_parser("replay", help="summarize a telemetry file")
    rep.add_argument("--telemetry", required=True)
    rep.add_argument(
        "--metrics", action="store_true", help="print summary metrics JSON"
    )
    return parser


def _cmd_run(args) -> int:
    from .sim.mission import run_mission
    from .sim.sensors import parse_outage

    try:
        config = load_config(args.config)
        gnss = parse_outage(args.gnss_outage) if args.gnss_outage else None
        gss = parse_outage(args.gss_outage) if args.gss_outage else None
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    result = run_mission(
        args.mission,
        args.seed,
        args.out,
        config=config,
        gnss_outage=gnss,
        gss_outage=gss,
        profile=args.profile,
    )
    print(
        f"{result.mission} seed={result.seed}: {result.reason} "
        f"t={result.t_final:.2f}s peak={result.peak_speed_kmh:.1f}km/h "
        f"violation={result.max_corridor_violation_m:.3f}m"
    )
    return EXIT_OK if result.completed else EXIT_FAILED


def _cmd_ebs(args) -> int:
    try:
        params = None
        if args.circuit is not None:
            params = json.loads(Path(args.circuit).read_text(encoding="utf-8"))
        sequences = None
        if args.sequence is not None:
            sequences = json.loads(Path(args.sequence).read_text(encoding="utf-8"))
        network = build_standard_network(params)
        report = coverage_report(
            network,
            max_simultaneous=args.max_failures,
            budget=args.budget,
            seed=args.seed,
            sequences=sequences,
        )
    except (OSError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    payload = report.to_dict()
    Path(args.out).write_text(
        json.dumps(payload, indent=1) + "\n", encoding="utf-8"
    )
    singles = payload["per_size"]["1"]
    frac = singles["detected_fraction"]
    print(
        f"checked sizes 1..{args.max_failures}; single-failure detection "
        f"{frac:.3f} ({singles['detected']}/{singles['evaluated']})"
    )
    return EXIT_OK if frac >= 1.0 else EXIT_FAILED


def _cmd_replay(args) -> int:
    from .sim.telemetry import read_telemetry, telemetry_metrics

    try:
        data = read_telemetry(args.telemetry)
        metrics = telemetry_metrics(data)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.metrics:
        print(json.dumps(metrics, indent=1))
    else:
        print(
            f"{metrics['ticks']} ticks over {metrics['duration_s']:.2f}s, "
            f"peak {metrics['peak_speed_kmh']:.1f} km/h, "
            f"pose RMS {metrics['pose_rms_m']:.3f} m"
        )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "ebs-verify":
        return _cmd_ebs(args)
    return _cmd_replay(args)


if __name__ == "__main__":
    sys.exit(main())
