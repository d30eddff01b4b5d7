"""Admission tallies at low, medium and high client arrival rates.

    python scripts/sentinel_table.py [--runs 10] [--seed 1] [--process poisson]
"""
from __future__ import annotations

import argparse

from tlora.harness.sentinel_experiment import SentinelExperiment, format_table, sentinel_experiment

LOADS = (("low", 0.05), ("medium", 0.1), ("high", 1.0))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clients", type=int, default=20)
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--process", choices=("poisson", "deterministic"), default="poisson")
    args = ap.parse_args()
    results = [(label, sentinel_experiment(SentinelExperiment(rate, args.clients, args.runs, args.seed, args.process)))
               for label, rate in LOADS]
    print(format_table(results), end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
