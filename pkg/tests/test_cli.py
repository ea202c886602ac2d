"""Command-line interface: exit codes and output artifacts."""

import json

import pytest

from racestack.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main
from racestack.sim.telemetry import TelemetryWriter, read_telemetry
from test_sim_telemetry import _rec

FAST_RUN = """
slam:
  n_particles: 80
mission:
  particles_acceleration: 80
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# --- argument handling --------------------------------------------------------


def test_usage_error_exits_config_code():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--mission", "acceleration"])  # missing --seed/--out
    assert exc.value.code == EXIT_CONFIG


def test_unknown_mission_exits_config_code():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--mission", "hillclimb", "--seed", "0", "--out", "/tmp/x"])
    assert exc.value.code == EXIT_CONFIG


def test_bad_outage_spec_is_config_error(tmp_path, capsys):
    code = main(
        [
            "run",
            "--mission",
            "acceleration",
            "--seed",
            "0",
            "--out",
            str(tmp_path),
            "--gnss-outage",
            "40:10",
        ]
    )
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_bad_config_file_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "c.yaml", "mpc:\n  horizont: 3\n")
    code = main(
        [
            "run",
            "--mission",
            "acceleration",
            "--seed",
            "0",
            "--config",
            cfg,
            "--out",
            str(tmp_path),
        ]
    )
    assert code == EXIT_CONFIG


# --- run ------------------------------------------------------------------------


def test_run_acceleration_writes_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, "c.yaml", FAST_RUN)
    out = tmp_path / "out"
    code = main(
        [
            "run",
            "--mission",
            "acceleration",
            "--seed",
            "0",
            "--config",
            cfg,
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert "acceleration seed=0" in stdout
    assert (out / "telemetry.csv").exists()
    assert (out / "map.json").exists()
    assert (out / "result.json").exists()
    result = json.loads((out / "result.json").read_text())
    assert result["completed"] is True
    data = read_telemetry(out / "telemetry.csv")
    assert data["t"].size > 10


def test_run_timeout_exits_failed(tmp_path):
    cfg = _write(
        tmp_path, "c.yaml", FAST_RUN + "  timeout_acceleration: 0.5\n"
    )
    code = main(
        [
            "run",
            "--mission",
            "acceleration",
            "--seed",
            "0",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == EXIT_FAILED


# --- ebs-verify --------------------------------------------------------------


def test_ebs_verify_single_failures(tmp_path, capsys):
    report = tmp_path / "report.json"
    code = main(["ebs-verify", "--max-failures", "1", "--out", str(report)])
    assert code == EXIT_OK
    payload = json.loads(report.read_text())
    singles = payload["per_size"]["1"]
    assert singles["detected_fraction"] == 1.0
    assert "single-failure detection 1.000" in capsys.readouterr().out


def test_ebs_verify_missing_circuit_file(tmp_path):
    code = main(
        [
            "ebs-verify",
            "--max-failures",
            "1",
            "--circuit",
            str(tmp_path / "nope.json"),
            "--out",
            str(tmp_path / "r.json"),
        ]
    )
    assert code == EXIT_CONFIG


# --- replay --------------------------------------------------------------------


def test_replay_metrics_json(tmp_path, capsys):
    path = tmp_path / "t.csv"
    with TelemetryWriter(path) as w:
        for k in range(20):
            w.write(_rec(0.05 * k))
    code = main(["replay", "--telemetry", str(path), "--metrics"])
    assert code == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["ticks"] == 20


def test_replay_missing_file(tmp_path, capsys):
    code = main(["replay", "--telemetry", str(tmp_path / "nope.csv")])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
