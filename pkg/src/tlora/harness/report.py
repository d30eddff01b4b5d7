"""Run artifacts: JSONL trace, JSON summary and a plain-text table."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .metrics import STAGES, MetricsReport
from .runner import RunResult
from .scenario import ScenarioConfig

TRACE_FILE, SUMMARY_FILE, TABLE_FILE = "trace.jsonl", "summary.json", "tableV.txt"


class ReportError(OSError):
    pass


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _fmt(x: float | None, digits: int = 3) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def render_table(summary: dict) -> str:
    """Stage delays, link quality, duty cycle and admission tallies for one run."""
    lines = [f"mode={summary['mode']} seed={summary['seed']} "
             f"completed={summary['completed']}/{summary['total_requests']}", ""]
    lines.append(f"{'Stage':<10}{'Delay (s)':>12}{'Share (%)':>12}")
    share = summary.get("stage_share") or {}
    for s in STAGES:
        lines.append(f"{s.upper():<10}{_fmt(summary.get('delta_' + s)):>12}{_fmt(share.get(s), 1):>12}")
    lines.append(f"{'TOTAL':<10}{_fmt(summary.get('delta_total')):>12}{'100.0' if share else '-':>12}")
    lines.append("")
    lines.append(f"packets sent {summary['beta_s']}, delivered {summary['beta_r']}, "
                 f"PDR {_fmt(summary.get('pdr'), 2)} %")
    lines.append(f"throughput (B/s): {_fmt(summary.get('throughput'), 2)}")
    lines.append(f"duty cycle (%): {_fmt(summary.get('duty_cycle'), 2)}")
    radio = summary.get("radio_duty_cycle") or {}
    lines.append("radio on-air (%): " + ", ".join(f"{k} {v:.4f}" for k, v in sorted(radio.items())))
    lines.append("")
    lines.append("# admission decisions in this run (hold time = actual session length)")
    header = f"{'Admitted':>10}{'Rej. (concurrency)':>22}{'Rej. (rate limit)':>20}"
    tallies = summary.get("sentinel") or {}
    lines += [header, "-" * len(header),
              f"{tallies.get('admitted', 0):>10}{tallies.get('rejected_concurrency', 0):>22}"
              f"{tallies.get('rejected_rate', 0):>20}"]
    return "\n".join(lines) + "\n"


def summary_dict(report: MetricsReport, config: ScenarioConfig | None = None) -> dict:
    out = report.to_dict()
    if config is not None:
        out["config"] = config.to_dict()
        out["config"]["retry"] = {"max_retries": config.retry_policy.max_retries,
                                  "ack_timeout": config.retry_policy.ack_timeout}
    return out


def emit_report(result: RunResult, out_dir: str | Path, config: ScenarioConfig | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"trace": out / TRACE_FILE, "summary": out / SUMMARY_FILE, "table": out / TABLE_FILE}
        airtime = ({"kind": "airtime", **e.to_json()} for e in result.ledger.entries)
        write_jsonl(paths["trace"], [*result.trace, *airtime])
        summary = summary_dict(result.report, config)
        with open(paths["summary"], "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        paths["table"].write_text(render_table(summary))
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc
    return paths


def load_report(in_dir: str | Path) -> tuple[dict, list[dict]]:
    base = Path(in_dir)
    try:
        with open(base / SUMMARY_FILE) as fh:
            summary = json.load(fh)
        trace = read_jsonl(base / TRACE_FILE)
    except OSError as exc:
        raise ReportError(f"cannot read report from {base}: {exc}") from exc
    return summary, trace
