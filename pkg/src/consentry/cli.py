"""Command-line experiment runner: single scenarios and parameter sweeps.

`consentry run --config scenario.json [--seed N] [--out DIR]` executes the
configured protocol for the configured number of trials, writing
`report.json` (full per-trial reports) and `summary.csv`.  `consentry sweep`
replays a base scenario over a grid of topology families / sizes and writes
`sweep.csv` with per-cell aggregates, including the measured message-bound
constant K.  Exit codes: 0 clean, 2 configuration error, 3 privacy violation
or unexpected termination.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path

from . import netsim
from .netsim import ScenarioConfig, ScenarioError
from .topology import TopologyError

SUMMARY_COLUMNS = ["trial", "protocol", "n", "diameter", "decided", "rounds",
                   "messages", "privacy_violations", "termination"]
SWEEP_COLUMNS = ["family", "n", "trials", "diameter", "rounds_mean", "rounds_max",
                 "messages_mean", "messages_max", "K", "non_viable",
                 "privacy_violations"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("CONSENTRY_OUT") or "."
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read config {path}: {exc}")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _decided_summary(report: netsim.SimReport) -> str:
    if report.protocol == "avg-untrusted":
        items = sorted((k, v) for k, v in report.extra.items()
                       if k.startswith("initiator_result/"))
        return ";".join(f"{k.split('/')[-1]}={_fmt(v)}" for k, v in items)
    values = []
    for pid, v in report.decided_values.items():
        if isinstance(pid, int) and v is not None:
            values.append(v)
    unique = sorted(set(_fmt(v) for v in values))
    return ";".join(unique)


def _run_trials(scenario: ScenarioConfig) -> list[netsim.SimReport]:
    return [netsim.run(scenario, trial=t) for t in range(scenario.trials)]


def _write_report(out: Path, scenario_raw: dict, reports) -> None:
    payload = {
        "schema_version": 1,
        "scenario": scenario_raw,
        "trials": [json.loads(r.to_json()) for r in reports],
    }
    (out / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=2))


def _write_summary(out: Path, scenario: ScenarioConfig, reports) -> None:
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for trial, report in enumerate(reports):
            rounds = [v for k, v in report.rounds_to_decide.items()
                      if isinstance(k, int)]
            msgs = [v for k, v in report.messages_sent.items()
                    if isinstance(k, int)]
            writer.writerow([
                trial, report.protocol, report.n,
                report.extra.get("diameter", ""),
                _decided_summary(report),
                max(rounds) if rounds else "",
                sum(msgs),
                len(report.privacy_violations),
                report.termination,
            ])


def cmd_run(args) -> int:
    raw = _load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    scenario = ScenarioConfig.from_dict(raw)
    scenario.resolve_topology()          # fail fast on config errors
    reports = _run_trials(scenario)
    for trial, r in enumerate(reports):
        t = scenario.resolve_topology(trial)
        r.extra["diameter"] = t.diameter() if t.is_connected() else None
    out = _out_dir(args)
    _write_report(out, raw, reports)
    _write_summary(out, scenario, reports)

    ok = True
    for trial, r in enumerate(reports):
        expected = "decided" if scenario.expect_termination else "deadline-exceeded"
        clean = not r.privacy_violations and r.termination == expected
        ok = ok and clean
        print(f"trial {trial}: protocol={r.protocol} n={r.n} "
              f"decided={_decided_summary(r) or '-'} termination={r.termination} "
              f"violations={len(r.privacy_violations)}")
    print(f"wrote {out / 'report.json'} and {out / 'summary.csv'}")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def _parse_vary(items) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise ScenarioError(f"--vary expects KEY=v1,v2,..., got {item!r}")
        key, _, values = item.partition("=")
        parsed = []
        for token in values.split(","):
            token = token.strip()
            if not token:
                continue
            try:
                parsed.append(json.loads(token))
            except json.JSONDecodeError:
                parsed.append(token)
        if not parsed:
            raise ScenarioError(f"--vary {key} has no values")
        grid[key] = parsed
    if not grid:
        raise ScenarioError("sweep requires at least one --vary KEY=v1,v2,...")
    return grid


def _cell_scenario(base: dict, assignment: dict) -> ScenarioConfig:
    raw = json.loads(json.dumps(base))
    topo_keys = {"family", "n", "p"}
    for key, value in assignment.items():
        if key in topo_keys:
            if not isinstance(raw.get("topology"), dict):
                raw["topology"] = {"family": "ring", "n": 4}
            raw["topology"][key] = value
        else:
            raw[key] = value
    if isinstance(raw.get("topology"), dict) and "family" in raw["topology"]:
        if not (isinstance(raw.get("inputs"), dict) and "random_uniform" in raw["inputs"]):
            raw["inputs"] = {"random_uniform": [-1000, 1000]}
    return ScenarioConfig.from_dict(raw)


def cmd_sweep(args) -> int:
    base = _load_config(args.config)
    grid = _parse_vary(args.vary)
    keys = sorted(grid)
    out = _out_dir(args)
    rows = []
    worst_k = 0.0
    any_violation = False
    for combo in itertools.product(*(grid[k] for k in keys)):
        assignment = dict(zip(keys, combo))
        scenario = _cell_scenario(base, assignment)
        reports = _run_trials(scenario)
        rounds, msgs, k_cell, violations, non_viable = [], [], 0.0, 0, 0
        diameter = None
        for trial, report in enumerate(reports):
            topo = scenario.resolve_topology(trial)
            diameter = topo.diameter()
            for pid, count in report.messages_sent.items():
                if not isinstance(pid, int) or topo.degree(pid) == 0:
                    continue
                k_cell = max(k_cell, count / (diameter * topo.degree(pid)))
            rounds.extend(v for k, v in report.rounds_to_decide.items()
                          if isinstance(k, int))
            msgs.extend(v for k, v in report.messages_sent.items()
                        if isinstance(k, int))
            violations += len(report.privacy_violations)
            non_viable += sum(1 for k, v in report.extra.items()
                              if k.startswith("initiator_result/")
                              and v == "non-viable")
        worst_k = max(worst_k, k_cell)
        any_violation = any_violation or violations > 0
        family = assignment.get("family",
                                scenario.topology.get("family", "")
                                if isinstance(scenario.topology, dict) else "")
        n = assignment.get("n", scenario.resolve_topology().n)
        rows.append([family, n, scenario.trials, diameter,
                     f"{sum(rounds) / len(rounds):.3f}" if rounds else "",
                     max(rounds) if rounds else "",
                     f"{sum(msgs) / len(msgs):.3f}" if msgs else "",
                     max(msgs) if msgs else "",
                     f"{k_cell:.4f}", non_viable, violations])
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)
    print(f"swept {len(rows)} cells; worst-case K = {worst_k:.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_ACCEPTANCE if any_violation else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consentry",
        description="Privacy-preserving consensus and leader-election simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep a scenario over a grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--vary", action="append", metavar="KEY=v1,v2,...")
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, TopologyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
