"""Run the twenty-request reference scenario in both modes and print the stage tables.

    python scripts/run_reference.py [--out runs/] [--seed 1]
"""
from __future__ import annotations

import argparse
import dataclasses
from pathlib import Path

from tlora.harness import load_scenario, run_scenario
from tlora.harness.report import emit_report

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "reference.yaml"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--scenario", type=Path, default=SCENARIO)
    args = ap.parse_args()

    base = dataclasses.replace(load_scenario(args.scenario), seed=args.seed)
    ok = True
    for mode in ("simulated_tls", "real_tls"):
        config = dataclasses.replace(base, mode=mode)
        result = run_scenario(config)
        paths = emit_report(result, args.out / mode, config)
        print(paths["table"].read_text())
        ok = ok and result.report.all_completed
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
