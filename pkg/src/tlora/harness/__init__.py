"""Scenario runner, KPIs, admission experiment and CLI."""

from .metrics import MetricsReport, compute_pdr, compute_total_delay
from .runner import RunResult, ScenarioFailed, run_scenario
from .scenario import ScenarioConfig, load_scenario

__all__ = ["MetricsReport", "RunResult", "ScenarioConfig", "ScenarioFailed", "compute_pdr",
           "compute_total_delay", "load_scenario", "run_scenario"]
