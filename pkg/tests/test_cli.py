"""Command-line interface tests: exit codes, run/check pipeline, sweep
CSV shape, and scenario output."""

import csv
import json

import pytest

from nattx.cli import main
from nattx.simnet import trace_to_jsonl


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_usage_errors_exit_64(capsys):
    for argv in (
        [],
        ["frobnicate"],
        ["run", "--protocol", "ncc"],  # missing --workload
        ["run", "--protocol", "bogus", "--workload", "google-f1"],
        ["scenario", "no-such-scenario"],
    ):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 64
        capsys.readouterr()


def test_sweep_rejects_bad_protocol_and_seed_range(capsys):
    code, _, err = run_cli(capsys, "sweep", "--workload", "google-f1",
                           "--protocols", "ncc,bogus")
    assert code == 64 and "bogus" in err
    code, _, err = run_cli(capsys, "sweep", "--workload", "google-f1",
                           "--seeds", "5")
    assert code == 64 and "LO:HI" in err


def test_run_then_check_pipeline(tmp_path, capsys):
    metrics = tmp_path / "m.json"
    trace = tmp_path / "t.jsonl"
    code, out, _ = run_cli(
        capsys, "run", "--protocol", "ncc", "--workload", "google-f1",
        "--seed", "1", "--duration", "300000", "--rate", "200",
        "--keys", "2000", "--servers", "2", "--clients", "4",
        "--out", str(metrics), "--trace", str(trace),
    )
    assert code == 0
    report = json.loads(metrics.read_text())
    assert report["attempts"] > 0
    assert report["commit_rate"] > 0.5

    code, out, _ = run_cli(capsys, "check", str(trace))
    assert code == 0 and "strictly serializable" in out


def test_run_writes_metrics_to_stdout(capsys):
    code, out, _ = run_cli(
        capsys, "run", "--protocol", "d2pl-nw", "--workload", "google-f1",
        "--duration", "200000", "--rate", "100", "--keys", "1000",
        "--servers", "2", "--clients", "2",
    )
    assert code == 0
    assert json.loads(out)["protocol"] == "d2pl-nw"


def test_check_violation_and_witness(tmp_path, capsys):
    trace = [
        {"k": "issue", "t": 0, "tx": "t1"},
        {"k": "wr", "t": 1, "tx": "t1", "key": 0, "ver": "v1", "order": [1]},
        {"k": "dec", "t": 2, "tx": "t1", "d": "c"},
        {"k": "issue", "t": 10, "tx": "t2"},
        {"k": "rd", "t": 11, "tx": "t2", "key": 0, "ver": "init"},
        {"k": "dec", "t": 12, "tx": "t2", "d": "c"},
    ]
    path = tmp_path / "bad.jsonl"
    path.write_bytes(trace_to_jsonl(trace))
    witness = tmp_path / "w.json"
    code, out, _ = run_cli(capsys, "check", str(path),
                           "--oracle", "--emit-witness", str(witness))
    assert code == 2 and "violation" in out
    detail = json.loads(witness.read_text())
    assert detail["kind"] == "inversion"


def test_check_malformed_trace(tmp_path, capsys):
    path = tmp_path / "m.jsonl"
    path.write_bytes(trace_to_jsonl([{"k": "dec", "t": 0, "tx": "t1", "d": "c"}]))
    code, out, _ = run_cli(capsys, "check", str(path))
    assert code == 3 and "malformed" in out

    code, _, err = run_cli(capsys, "check", str(tmp_path / "missing.jsonl"))
    assert code == 3 and "cannot read" in err


def test_sweep_csv_columns(tmp_path, capsys):
    out_csv = tmp_path / "sweep.csv"
    code, _, _ = run_cli(
        capsys, "sweep", "--workload", "google-f1",
        "--protocols", "ncc,docc", "--seeds", "0:2",
        "--duration", "200000", "--rate", "100", "--keys", "1000",
        "--servers", "2", "--clients", "2", "--check", "--out", str(out_csv),
    )
    assert code == 0
    with open(out_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert {r["protocol"] for r in rows} == {"ncc", "docc"}
    assert {r["seed"] for r in rows} == {"0", "1"}
    assert all(r["checker_exit"] == "0" for r in rows)
    assert all(float(r["commit_rate"]) >= 0 for r in rows)


def test_scenario_prints_message_and_json(tmp_path, capsys):
    out_json = tmp_path / "s.json"
    code, out, _ = run_cli(capsys, "scenario", "fig4b-smart-retry",
                           "--out", str(out_json))
    assert code == 0
    assert out.splitlines()[0] == "committed at t'=6"
    result = json.loads(out_json.read_text())
    assert result["t_prime"] == 6


def test_scenario_no_rtc_flag(capsys):
    code, out, _ = run_cli(capsys, "scenario", "rtc-inversion", "--no-rtc")
    assert code == 0
    assert "checker exit 2" in out.splitlines()[0]
