"""Scenario configuration: dataclasses plus a YAML loader whose keys mirror the field names."""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..frame_codec import L_MAX, RetryPolicy
from ..link import default_retry_policy
from ..lora_channel import ChannelConfig
from ..sentinel import SentinelConfig
from ..tls_flows import FlightSizes

HUB = "eh"
MODES = ("simulated_tls", "real_tls")


class ScenarioError(ValueError):
    pass


class NoPathToHub(ScenarioError):
    pass


@dataclass(frozen=True)
class Topology:
    """Devices on the LAN side. ``links`` lists undirected edges; the hub is named ``eh``.

    With no links given every device hangs directly off the hub.
    """
    n_devices: int = 1
    device_addresses: tuple[str, ...] = ()
    links: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.n_devices < 1:
            raise ScenarioError("n_devices must be >= 1")
        addrs = tuple(self.device_addresses) or tuple(f"192.168.4.{10 + i}" for i in range(self.n_devices))
        if len(addrs) != self.n_devices:
            raise ScenarioError(f"{len(addrs)} addresses given for {self.n_devices} devices")
        if len(set(addrs)) != len(addrs):
            raise ScenarioError("device addresses must be distinct")
        object.__setattr__(self, "device_addresses", addrs)
        links = tuple(tuple(edge) for edge in self.links) or tuple((a, HUB) for a in addrs)
        object.__setattr__(self, "links", links)

    def unreachable(self) -> list[str]:
        """Devices with no LAN path to the hub."""
        adj: dict[str, set[str]] = {}
        for a, b in self.links:
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        seen, todo = {HUB}, deque([HUB])
        while todo:
            for nxt in adj.get(todo.popleft(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return [d for d in self.device_addresses if d not in seen]

    def validate(self) -> None:
        missing = self.unreachable()
        if missing:
            raise NoPathToHub(f"no path to the hub from {', '.join(missing)}")


@dataclass(frozen=True)
class Arrival:
    rate: float = 0.0     # clients per second; 0 means one lone client
    count: int = 20
    process: str = "poisson"   # or "deterministic"


@dataclass(frozen=True)
class Request:
    qname: str = "api.test"
    expected_body_bytes: int = 55
    count: int = 1
    interval: float = 20.0    # seconds between request starts


@dataclass(frozen=True)
class Network:
    """Wired latencies (one-way, seconds) and addresses outside the LoRa hop."""
    lan_latency: float = 0.002
    upstream_latency: float = 0.020
    resolver_latency: float = 0.030
    server_name: str = "api.test"   # the only name the upstream resolver knows
    server_ip: str = "127.0.0.1"
    relay_ip: str = "127.0.0.2"
    resolver_ip: str = "192.168.4.1"
    syn_ack_timeout_eh: float = 30.0
    syn_ack_timeout_nr: float = 10.0


@dataclass(frozen=True)
class ScenarioConfig:
    topology: Topology = field(default_factory=Topology)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    l_max: int = L_MAX
    retry: RetryPolicy | None = None    # None: derived from the channel airtimes
    sentinel: SentinelConfig = field(default_factory=SentinelConfig)
    processing_delay_per_hop: float = 0.200   # calibrated, see README
    arrival: Arrival = field(default_factory=Arrival)
    request: Request = field(default_factory=Request)
    seed: int = 0
    mode: str = "simulated_tls"
    network: Network = field(default_factory=Network)
    tls_flights: FlightSizes = field(default_factory=FlightSizes)
    duty_window_s: float = 1200.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.l_max <= 255:
            raise ScenarioError("l_max must be 1..255")
        if not 0 <= self.seed < 2 ** 64:
            raise ScenarioError("seed must be an unsigned 64-bit integer")
        if self.processing_delay_per_hop < 0:
            raise ScenarioError("processing_delay_per_hop must be >= 0")
        if self.request.count < 1:
            raise ScenarioError("request.count must be >= 1")
        self.topology.validate()

    @property
    def retry_policy(self) -> RetryPolicy:
        return self.retry or default_retry_policy(self.channel, self.l_max)

    def with_overrides(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"topology": Topology, "channel": ChannelConfig, "sentinel": SentinelConfig,
             "arrival": Arrival, "request": Request, "network": Network, "tls_flights": FlightSizes}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def scenario_from_dict(data: dict) -> ScenarioConfig:
    data = dict(data or {})
    kwargs = {}
    retry = data.pop("retry", None)
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), name)
    if retry is not None:
        retry = dict(retry)
        if "ack_timeout" not in retry:
            base = default_retry_policy(kwargs.get("channel", ChannelConfig()), data.get("l_max", L_MAX))
            retry["ack_timeout"] = base.ack_timeout
        kwargs["retry"] = _build(RetryPolicy, retry, "retry")
    top_level = {f.name for f in dataclasses.fields(ScenarioConfig)} - set(_SECTIONS)
    unknown = set(data) - top_level
    if unknown:
        raise ScenarioError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs.update(data)
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        return scenario_from_dict(yaml.safe_load(fh))
