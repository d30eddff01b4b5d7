"""Admission-control experiment: many clients contend for the End Hub's single tunnel slot."""

from __future__ import annotations

import heapq
import random
import statistics
from dataclasses import dataclass, field

from ..sentinel import Decision, Sentinel, SentinelConfig

HOLD_TIME_NOTE = ("hold time per admitted session ~ Normal(14.02 s, 2.05 s) clipped to [8, 20] s; "
                  "assumed from the measured end-to-end request delay")


@dataclass(frozen=True)
class HoldTimeModel:
    mean: float = 14.02
    stdev: float = 2.05
    low: float = 8.0
    high: float = 20.0

    def draw(self, rng: random.Random) -> float:
        return min(self.high, max(self.low, rng.gauss(self.mean, self.stdev)))


@dataclass(frozen=True)
class SentinelExperiment:
    rate: float                 # clients per second; 0 means a single client
    clients: int = 20
    runs: int = 10
    seed: int = 0
    process: str = "poisson"    # or "deterministic"
    sentinel: SentinelConfig = field(default_factory=SentinelConfig)
    hold: HoldTimeModel = field(default_factory=HoldTimeModel)


@dataclass(frozen=True)
class RunTally:
    admitted: int
    rejected_concurrency: int
    rejected_rate: int

    def as_dict(self) -> dict[str, int]:
        return {"admitted": self.admitted, "rejected_concurrency": self.rejected_concurrency,
                "rejected_rate": self.rejected_rate}


@dataclass(frozen=True)
class ExperimentResult:
    experiment: SentinelExperiment
    runs: tuple[RunTally, ...]

    def mean(self, key: str) -> float:
        return statistics.fmean(getattr(r, key) for r in self.runs)

    def stdev(self, key: str) -> float:
        values = [getattr(r, key) for r in self.runs]
        return statistics.stdev(values) if len(values) > 1 else 0.0

    def summary(self) -> dict[str, dict[str, float]]:
        keys = ("admitted", "rejected_concurrency", "rejected_rate")
        return {k: {"mean": self.mean(k), "stdev": self.stdev(k)} for k in keys}


def arrival_times(rate: float, clients: int, rng: random.Random, process: str = "poisson") -> list[float]:
    if rate <= 0:
        return [0.0]
    if process == "deterministic":
        return [i / rate for i in range(clients)]
    if process != "poisson":
        raise ValueError(f"unknown arrival process {process!r}")
    t, out = 0.0, []
    for _ in range(clients):
        out.append(t)
        t += rng.expovariate(rate)
    return out


def run_once(exp: SentinelExperiment, run_index: int) -> RunTally:
    rng = random.Random(f"sentinel-{exp.seed}-{exp.rate}-{run_index}")
    sentinel = Sentinel(exp.sentinel, now=0.0)
    releases: list[float] = []
    for t in arrival_times(exp.rate, exp.clients, rng, exp.process):
        # a slot freed at the same instant as an arrival is free for it
        while releases and releases[0] <= t:
            heapq.heappop(releases)
            sentinel.release()
        if sentinel.admit(t) is Decision.ADMITTED:
            heapq.heappush(releases, t + exp.hold.draw(rng))
    tallies = sentinel.tallies
    return RunTally(tallies.admitted, tallies.rejected_concurrency, tallies.rejected_rate)


def sentinel_experiment(exp: SentinelExperiment) -> ExperimentResult:
    return ExperimentResult(exp, tuple(run_once(exp, i) for i in range(exp.runs)))


def format_table(results: list[tuple[str, ExperimentResult]]) -> str:
    """Plain-text table of admitted / rejected counts, mean ± stdev over runs."""
    lines = [f"# {HOLD_TIME_NOTE}"]
    if results:
        exp = results[0][1].experiment
        lines.append(f"# clients={exp.clients} runs={exp.runs} n_max={exp.sentinel.n_max} "
                     f"t_max={exp.sentinel.t_max:g} rho={exp.sentinel.rho:.5f}/s")
    header = f"{'Load':<8}{'Rate (1/s)':>12}{'Admitted':>18}{'Rej. (concurrency)':>22}{'Rej. (rate limit)':>20}"
    lines += [header, "-" * len(header)]
    for label, res in results:
        cells = [f"{res.mean(k):6.2f} ± {res.stdev(k):5.2f}"
                 for k in ("admitted", "rejected_concurrency", "rejected_rate")]
        lines.append(f"{label:<8}{res.experiment.rate:>12g}{cells[0]:>18}{cells[1]:>22}{cells[2]:>20}")
    return "\n".join(lines) + "\n"
