"""Wire a full tunnel in one simulator and replay HTTPS requests through it."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import random
from dataclasses import dataclass, field

from ..end_hub import EndHub
from ..endpoints import DeviceResult, EndDevice, Lan, SimUpstream, WebServer
from ..frame_codec import KIND_OFFSET, FrameError, MessageKind, decode_frame
from ..link import LinkEndpoint
from ..lora_channel import EH, NR, AirtimeLedger, LoRaChannel, duty_cycle
from ..net_relay import NetRelay
from ..sentinel import Sentinel
from ..sim import Simulator
from ..tls_flows import API_BODY, make_pair
from .metrics import MetricsReport, RequestMetrics, aggregate, compute_pdr, compute_total_delay
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)


class ScenarioFailed(RuntimeError):
    def __init__(self, message: str, context: list[str]):
        super().__init__(message)
        self.context = context


@dataclass
class RunResult:
    report: MetricsReport
    trace: list[dict]
    ledger: AirtimeLedger
    bodies_received: list[bytes | None] = field(default_factory=list)
    bodies_sent: list[bytes] = field(default_factory=list)
    syn_acks_on_lora: list[bytes] = field(default_factory=list)


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def tls_payload_streams(ledger: AirtimeLedger) -> dict[str, bytes]:
    """Per-sender concatenation of TLS_DATA chunk payloads as they crossed the air."""
    streams: dict[str, bytearray] = {}
    for entry in ledger.entries:
        try:
            frame = decode_frame(entry.frame)
        except FrameError:
            continue
        if frame.kind == MessageKind.TLS_DATA:
            streams.setdefault(entry.sender, bytearray()).extend(frame.payload)
    return {k: bytes(v) for k, v in streams.items()}


def plaintext_hits(ledger: AirtimeLedger, needle: bytes) -> int:
    """Count places where ``needle`` is visible on the LoRa link, per frame and per stream."""
    hits = sum(needle in e.frame for e in ledger.entries)
    hits += sum(stream.count(needle) for stream in tls_payload_streams(ledger).values())
    return hits


def run_scenario(config: ScenarioConfig, *, body: bytes = API_BODY, strict: bool = False) -> RunResult:
    """Run ``config.request.count`` requests end to end and collect metrics and a trace.

    With ``strict`` any failed request raises :class:`ScenarioFailed` carrying
    the proxies' error logs.
    """
    sim = Simulator()
    trace: list[dict] = []
    seed = config.seed
    channel_cfg = dataclasses.replace(config.channel, rng_seed=derive_seed(seed, f"channel-{config.channel.rng_seed}"))
    channel = LoRaChannel(channel_cfg)
    rng = random.Random(derive_seed(seed, "hosts"))

    eh_link = LinkEndpoint(sim, channel, EH, config.retry_policy, config.l_max, config.processing_delay_per_hop)
    nr_link = LinkEndpoint(sim, channel, NR, config.retry_policy, config.l_max, config.processing_delay_per_hop)
    eh_link.connect(nr_link)

    def on_transmit(node, frame, t, outcome):
        trace.append({"kind": "lora", "t": t, "node": node, "len": len(frame), "frame_kind": frame[KIND_OFFSET],
                      "outcome": type(outcome).__name__.lower()})

    eh_link.on_transmit = nr_link.on_transmit = on_transmit

    net = config.network
    lan = Lan(sim, net.lan_latency)
    sentinel = Sentinel(config.sentinel, now=0.0)
    hub = EndHub(sim, eh_link, sentinel, lan.from_hub, syn_ack_timeout=net.syn_ack_timeout_eh, trace=trace.append)
    lan.hub = hub.on_lan_packet

    pending_server_tls: list = []   # one server endpoint per launched request, in order
    server = WebServer(sim, net.server_ip, lambda: pending_server_tls.pop(0), body=body, rng=random.Random(rng.getrandbits(64)))
    upstream = SimUpstream(sim, server, {net.server_name: net.server_ip}, net.upstream_latency)
    relay = NetRelay(sim, nr_link, upstream, relay_ip=net.relay_ip, resolver_latency=net.resolver_latency,
                     syn_ack_timeout=net.syn_ack_timeout_nr, ts_offset=rng.getrandbits(31), trace=trace.append)

    report = MetricsReport(mode=config.mode, seed=seed)
    results: list[DeviceResult | None] = [None] * config.request.count
    devices = config.topology.device_addresses

    def launch(i: int) -> None:
        client_tls, server_tls = make_pair(config.mode, derive_seed(seed, f"tls-{i}"), config.tls_flights)
        pending_server_tls.append(server_tls)
        dev_ip = devices[i % len(devices)]
        trace.append({"kind": "request_start", "t": sim.now, "index": i, "device": dev_ip})

        def done(res: DeviceResult, i=i, dev_ip=dev_ip):
            results[i] = res
            trace.append({"kind": "request_done", "t": sim.now, "index": i, "device": dev_ip, "ok": res.ok,
                          "error": res.error, "stages": res.timeline.stages()})
            lan.devices.pop(dev_ip, None)
            if i + 1 < config.request.count:
                start_at = max((i + 1) * config.request.interval, sim.now + 1.0)
                sim.at(start_at, launch, i + 1)

        device = EndDevice(sim, lan, dev_ip, client_tls, qname=config.request.qname, resolver_ip=net.resolver_ip,
                           rng=random.Random(rng.getrandbits(64)), on_done=done)
        device.start()

    sim.at(0.0, launch, 0)
    sim.run()

    for i, res in enumerate(results):
        if res is None:
            report.requests.append(RequestMetrics(i, devices[i % len(devices)], False, {}, None, {}, 0, None,
                                                  error="never finished"))
            continue
        stages = res.timeline.stages()
        ok = res.ok and res.body == body
        total, share, throughput = None, {}, None
        if ok:
            breakdown = compute_total_delay(stages)
            total, share = breakdown.total, breakdown.share
            throughput = len(res.body) / stages["access"] if stages["access"] > 0 else None
        report.requests.append(RequestMetrics(i, devices[i % len(devices)], ok, stages, total, share,
                                              len(res.body or b""), throughput,
                                              error=None if ok else (res.error or "body mismatch"),
                                              tls_version=res.tls_version))

    stats_eh, stats_nr = eh_link.stats, nr_link.stats
    report.beta_s = stats_eh.chunks_sent + stats_nr.chunks_sent
    report.beta_r = stats_eh.chunks_received + stats_nr.chunks_received
    report.pdr = compute_pdr(report.beta_s, report.beta_r) if report.beta_s else None
    report.retransmissions = stats_eh.retransmissions + stats_nr.retransmissions
    report.airtime_s = {EH: channel.ledger.total_airtime(EH), NR: channel.ledger.total_airtime(NR)}
    window = max(config.duty_window_s, sim.now)
    report.radio_duty_cycle = {n: duty_cycle(channel.ledger, window, n) for n in (EH, NR)}
    report.sentinel = sentinel.tallies.as_dict()
    report.errors = hub.errors + relay.errors
    report.sim_time_s = sim.now
    aggregate(report, config.duty_window_s)

    synacks = []
    for entry in channel.ledger.entries:
        if entry.sender == NR and entry.frame[KIND_OFFSET] == MessageKind.TCP_SYNACK:
            synacks.append(entry.frame)
    result = RunResult(report, trace, channel.ledger, [r.body if r else None for r in results],
                       list(server.bodies_sent), synacks)
    if strict and not report.all_completed:
        failed = [r.error for r in report.requests if not r.ok]
        raise ScenarioFailed(f"{len(failed)} request(s) failed: {failed}", report.errors)
    return result
