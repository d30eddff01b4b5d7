"""KPI arithmetic and the per-run metrics report."""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

STAGES = ("dns", "tcp", "tls", "access")


class MissingStage(KeyError):
    pass


class NoPacketsSent(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class DelayBreakdown:
    total: float
    share: dict[str, float]   # percent of total per stage


def compute_total_delay(stages: Mapping[str, float] | Sequence[float]) -> DelayBreakdown:
    """Sum the DNS, TCP, TLS and access delays and report each stage's share in percent."""
    if not isinstance(stages, Mapping):
        values = list(stages)
        if len(values) != len(STAGES):
            raise MissingStage(f"expected {len(STAGES)} stage delays, got {len(values)}")
        stages = dict(zip(STAGES, values))
    missing = [s for s in STAGES if stages.get(s) is None]
    if missing:
        raise MissingStage(", ".join(missing))
    total = 0.0
    for s in STAGES:
        total += stages[s]
    share = {s: (100.0 * stages[s] / total if total else 0.0) for s in STAGES}
    return DelayBreakdown(total, share)


def compute_pdr(sent: int, received: int) -> float:
    if sent <= 0:
        raise NoPacketsSent("no packets were sent")
    if not 0 <= received <= sent:
        raise ValueError(f"received={received} must lie in [0, sent={sent}]")
    return 100.0 * received / sent


def duty_cycle_pct(on_time: float, window: float) -> float:
    if window <= 0:
        raise ValueError("window must be positive")
    return 100.0 * on_time / window


@dataclass
class RequestMetrics:
    index: int
    device: str
    ok: bool
    stages: dict[str, float]
    total: float | None
    share: dict[str, float]
    body_bytes: int
    throughput: float | None      # response bytes per second over the access stage
    error: str | None = None
    tls_version: str | None = None


@dataclass
class MetricsReport:
    mode: str
    seed: int
    requests: list[RequestMetrics] = field(default_factory=list)
    delta_dns: float | None = None
    delta_tcp: float | None = None
    delta_tls: float | None = None
    delta_access: float | None = None
    delta_total: float | None = None
    delta_total_std: float | None = None
    stage_share: dict[str, float] = field(default_factory=dict)
    beta_s: int = 0
    beta_r: int = 0
    pdr: float | None = None
    throughput: float | None = None
    duty_cycle: float | None = None               # mean total delay over the duty window, percent
    radio_duty_cycle: dict[str, float] = field(default_factory=dict)  # measured airtime share per node
    airtime_s: dict[str, float] = field(default_factory=dict)
    sentinel: dict[str, int] = field(default_factory=dict)
    retransmissions: int = 0
    completed: int = 0
    total_requests: int = 0
    errors: list[str] = field(default_factory=list)
    sim_time_s: float = 0.0

    @property
    def all_completed(self) -> bool:
        return self.total_requests > 0 and self.completed == self.total_requests

    def to_dict(self) -> dict:
        d = asdict(self)
        d["all_completed"] = self.all_completed
        return d


def aggregate(report: MetricsReport, duty_window: float) -> MetricsReport:
    """Fill the mean stage delays, shares, throughput and duty cycle from the per-request rows."""
    done = [r for r in report.requests if r.ok and r.total is not None]
    report.completed = sum(r.ok for r in report.requests)
    report.total_requests = len(report.requests)
    if not done:
        return report
    means = {s: statistics.fmean(r.stages[s] for r in done) for s in STAGES}
    report.delta_dns, report.delta_tcp = means["dns"], means["tcp"]
    report.delta_tls, report.delta_access = means["tls"], means["access"]
    breakdown = compute_total_delay(means)
    report.delta_total = breakdown.total
    report.stage_share = breakdown.share
    totals = [r.total for r in done]
    report.delta_total_std = statistics.stdev(totals) if len(totals) > 1 else 0.0
    rates = [r.throughput for r in done if r.throughput is not None]
    report.throughput = statistics.fmean(rates) if rates else None
    report.duty_cycle = duty_cycle_pct(report.delta_total, duty_window)
    return report
