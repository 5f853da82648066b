"""CLI runner: file outputs, exit codes, sweeps."""

import csv
import json
from pathlib import Path

import pytest

from consentry.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def read_summary(out):
    with open(Path(out) / "summary.csv") as fh:
        return list(csv.DictReader(fh))


def test_run_ring4_avg(tmp_path, capsys):
    rc = main(["run", "--config", str(CONFIGS / "ring4_avg.json"),
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema_version"] == 1
    trial = report["trials"][0]
    assert trial["decided_values"]["0"] == pytest.approx(2.5)
    assert trial["termination"] == "decided"
    rows = read_summary(tmp_path)
    assert rows[0]["decided"] == "2.5"
    assert rows[0]["protocol"] == "avg-trusted"
    assert rows[0]["privacy_violations"] == "0"
    assert "decided=2.5" in capsys.readouterr().out


def test_run_is_idempotent_byte_for_byte(tmp_path):
    args = ["run", "--config", str(CONFIGS / "ring4_avg.json"),
            "--out", str(tmp_path)]
    main(args)
    first = (tmp_path / "report.json").read_bytes()
    first_csv = (tmp_path / "summary.csv").read_bytes()
    main(args)
    assert (tmp_path / "report.json").read_bytes() == first
    assert (tmp_path / "summary.csv").read_bytes() == first_csv


def test_run_fig2_election(tmp_path):
    rc = main(["run", "--config", str(CONFIGS / "fig2_election.json"),
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    trial = report["trials"][0]
    assert trial["decided_values"]["0"] == 0         # winner is process 0
    assert trial["decided_values"]["trusted"] == 0


def test_run_outlier_config(tmp_path):
    rc = main(["run", "--config", str(CONFIGS / "ring4_outlier.json"),
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    rows = read_summary(tmp_path)
    assert rows[0]["decided"] == "2"


def test_run_seed_override_changes_report(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", str(CONFIGS / "ring4_avg.json"), "--out", str(out1)])
    main(["run", "--config", str(CONFIGS / "ring4_avg.json"), "--seed", "99",
          "--out", str(out2)])
    r1 = json.loads((out1 / "report.json").read_text())
    r2 = json.loads((out2 / "report.json").read_text())
    assert r1["trials"][0]["seed"] != r2["trials"][0]["seed"]


def test_run_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "protocol": "avg-trusted",
        "topology": {"n": 4, "edges": [[0, 1], [1, 2], [2, 3], [3, 0]]},
        "inputs": [1, 2, 3],
    }))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"protocol": "avg-trusted", "topology": {},
                                   "inputs": [], "typo_field": 1}))
    assert main(["run", "--config", str(unknown), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_run_unexpected_termination_exits_3(tmp_path):
    cfg = tmp_path / "crash.json"
    cfg.write_text(json.dumps({
        "protocol": "avg-trusted",
        "topology": {"n": 4, "edges": [[0, 1], [1, 2], [2, 3]]},
        "inputs": [1, 2, 3, 4],
        "faults": [{"process": 1, "time": 1}],
    }))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_ACCEPTANCE
    cfg2 = tmp_path / "crash_expected.json"
    cfg2.write_text(json.dumps({
        "protocol": "avg-trusted",
        "topology": {"n": 4, "edges": [[0, 1], [1, 2], [2, 3]]},
        "inputs": [1, 2, 3, 4],
        "faults": [{"process": 1, "time": 1}],
        "expect_termination": False,
    }))
    assert main(["run", "--config", str(cfg2), "--out", str(tmp_path)]) == EXIT_OK


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CONSENTRY_OUT", str(tmp_path / "envout"))
    rc = main(["run", "--config", str(CONFIGS / "ring4_avg.json")])
    assert rc == EXIT_OK
    assert (tmp_path / "envout" / "report.json").exists()


def test_sweep_rings(tmp_path):
    rc = main(["sweep", "--config", str(CONFIGS / "sweep_base.json"),
               "--vary", "n=4,8", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    for row in rows:
        # on rings every process completes within diameter rounds
        assert int(row["rounds_max"]) <= int(row["diameter"])
        assert float(row["K"]) > 0
        assert row["privacy_violations"] == "0"


def test_sweep_star_and_family_grid(tmp_path):
    rc = main(["sweep", "--config", str(CONFIGS / "sweep_base.json"),
               "--vary", "family=star,path", "--vary", "n=4,6",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert {r["family"] for r in rows} == {"star", "path"}


def test_sweep_untrusted_star_center_flags_non_viable(tmp_path):
    base = tmp_path / "untrusted.json"
    base.write_text(json.dumps({
        "protocol": "avg-untrusted",
        "topology": {"family": "star", "n": 4},
        "inputs": {"random_uniform": [-10, 10]},
        "initiators": [0],
        "seed": 5,
        "trials": 2,
    }))
    rc = main(["sweep", "--config", str(base), "--vary", "n=4,6",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:       # the hub is a cut vertex in every cell
        assert int(row["non_viable"]) == 2


def test_sweep_empty_grid_exits_2(tmp_path):
    assert main(["sweep", "--config", str(CONFIGS / "sweep_base.json"),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sweep", "--config", str(CONFIGS / "sweep_base.json"),
                 "--vary", "n=", "--out", str(tmp_path)]) == EXIT_CONFIG
