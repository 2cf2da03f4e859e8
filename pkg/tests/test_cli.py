import csv

import pytest

from bpeq import cli
from bpeq.scenarios import scenario_path

from test_harness import SMALL


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL + "seeds: [0]\n")
    return path


def test_validate_ok(config, capsys):
    assert cli.main(["validate", "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert "config ok" in out and "fixed plan I1" in out


def test_validate_network(capsys):
    assert cli.main(["validate", "--network", str(scenario_path("grid3x3.network.yaml"))]) == 0
    assert "9 intersections" in capsys.readouterr().out


def test_validate_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL + "penetration: 1.5\n")
    assert cli.main(["validate", "--config", str(bad)]) == 1
    assert "bad.yaml:" in capsys.readouterr().err


def test_run_writes_reports(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config), "--out-dir", str(out), "--events", "--check-invariants"]) == 0
    for name in ("delay.csv", "throughput.csv", "max_queue.csv", "runs.jsonl", "summary.txt", "events_seed0.jsonl"):
        assert (out / name).is_file()
    assert "bp_perfect" in capsys.readouterr().out


def test_out_dir_from_env(config, tmp_path, monkeypatch):
    monkeypatch.setenv("BPEQ_OUT_DIR", str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(config)]) == 0
    assert (tmp_path / "env" / "delay.csv").is_file()


def test_run_failure_exit_code(config, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(cli, "run_config", boom)
    assert cli.main(["run", "--config", str(config), "--out-dir", str(tmp_path)]) == 2


def test_report_rebuild_and_missing(config, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(config), "--out-dir", str(out)]) == 0
    (out / "delay.csv").unlink()
    assert cli.main(["report", "--out-dir", str(out)]) == 0
    assert (out / "delay.csv").is_file()
    assert cli.main(["report", "--out-dir", str(tmp_path / "empty")]) == 3


def test_sweep(tmp_path, config):
    sweep = tmp_path / "s.yaml"
    sweep.write_text(f"base: {config}\naxes:\n  controller: [bp_perfect, fixed]\nseeds: [0, 1]\n")
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--sweep", str(sweep), "--out-dir", str(out)]) == 0
    with open(out / "runs_summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_replay_estimate(config, tmp_path):
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(config), "--out-dir", str(out), "--events"]) == 0
    target = tmp_path / "queues.csv"
    code = cli.main([
        "replay-estimate", "--probes", str(out / "events_seed0.jsonl"), "--config", str(config),
        "--at", "60", "--at", "120", "--output", str(target),
    ])
    assert code == 0
    rows = list(csv.reader(target.open()))
    assert rows[0][0] == "t" and len(rows) == 3
    assert "N_in" in rows[0]


def test_replay_needs_network(tmp_path, capsys):
    assert cli.main(["replay-estimate", "--probes", str(tmp_path / "x.csv")]) == 1


def test_missing_probe_log(tmp_path):
    code = cli.main(["replay-estimate", "--probes", str(tmp_path / "nope.csv"), "--network", str(scenario_path("four_leg.network.yaml"))])
    assert code == 1
