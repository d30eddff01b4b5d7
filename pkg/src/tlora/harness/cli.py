"""Command line: ``tlora run``, ``tlora sentinel`` and ``tlora report``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .report import ReportError, emit_report, load_report, render_table
from .runner import run_scenario
from .scenario import ScenarioConfig, ScenarioError, load_scenario
from .sentinel_experiment import SentinelExperiment, format_table, sentinel_experiment

_MODES = {"real": "real_tls", "sim": "simulated_tls"}


def _cmd_run(args) -> int:
    config = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode:
        changes["mode"] = _MODES[args.mode]
    if changes:
        config = dataclasses.replace(config, **changes)
    result = run_scenario(config)
    paths = emit_report(result, args.out, config)
    print(paths["table"].read_text(), end="")
    rep = result.report
    for r in rep.requests:
        if not r.ok:
            print(f"request {r.index} failed: {r.error}", file=sys.stderr)
    return 0 if rep.all_completed else 1


def _cmd_sentinel(args) -> int:
    exp = SentinelExperiment(rate=args.rate, clients=args.clients, runs=args.runs, seed=args.seed,
                             process=args.process)
    res = sentinel_experiment(exp)
    table = format_table([(args.label, res)])
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tableV.txt").write_text(table)
        (out / "summary.json").write_text(json.dumps(
            {"rate": exp.rate, "clients": exp.clients, "runs": [r.as_dict() for r in res.runs],
             "summary": res.summary()}, indent=2))
    return 0


def _cmd_report(args) -> int:
    summary, trace = load_report(args.in_dir)
    print(render_table(summary), end="")
    kinds: dict[str, int] = {}
    for rec in trace:
        kinds[rec.get("kind", "?")] = kinds.get(rec.get("kind", "?"), 0) + 1
    print("trace records: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return 0 if summary.get("all_completed") else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlora", description="HTTPS over a simulated LoRa tunnel")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario end to end")
    run.add_argument("--scenario", type=Path, help="YAML scenario file (defaults apply when omitted)")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--mode", choices=sorted(_MODES))
    run.set_defaults(func=_cmd_run)

    sen = sub.add_parser("sentinel", help="admission-control experiment")
    sen.add_argument("--rate", type=float, required=True, help="client arrivals per second")
    sen.add_argument("--clients", type=int, default=20)
    sen.add_argument("--runs", type=int, default=10)
    sen.add_argument("--seed", type=int, default=0)
    sen.add_argument("--process", choices=("poisson", "deterministic"), default="poisson")
    sen.add_argument("--label", default="-")
    sen.add_argument("--out", type=Path)
    sen.set_defaults(func=_cmd_sentinel)

    rep = sub.add_parser("report", help="re-render a finished run")
    rep.add_argument("--in", dest="in_dir", type=Path, required=True)
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
