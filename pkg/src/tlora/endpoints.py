"""Virtual hosts on either side of the tunnel: an end device, a web server, and the wires between them."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from .packet_engine import (
    DNS_PORT,
    PacketError,
    PacketView,
    Protocol,
    TcpFlags,
    dns_query_payload,
    parse_dns_answer,
    parse_packet,
    syn_options,
    tcp_packet,
    timestamp_option,
    udp_packet,
)
from .net_relay import ResolutionFailed
from .sim import Simulator, Timer
from .tls_flows import TlsEndpoint, http_request, http_response, request_complete, response_complete

log = logging.getLogger(__name__)

MASK32 = 0xFFFFFFFF


class Lan:
    """Shared segment between end devices and the End Hub, with a fixed one-way latency.

    Every device frame goes to the hub (it is the gateway); frames from the hub
    are delivered to the device that owns the destination address.
    """

    def __init__(self, sim: Simulator, latency: float = 0.002):
        self.sim = sim
        self.latency = latency
        self.devices: dict[str, Callable[[PacketView], None]] = {}
        self.hub: Callable[[PacketView], None] = lambda p: None
        self.frames = 0

    def attach(self, ip: str, receive: Callable[[PacketView], None]) -> None:
        self.devices[ip] = receive

    def from_device(self, pkt: PacketView) -> None:
        self.frames += 1
        self.sim.schedule(self.latency, self.hub, pkt)

    def from_hub(self, pkt: PacketView) -> None:
        target = self.devices.get(pkt.dst_ip)
        if target is None:
            return
        self.frames += 1
        self.sim.schedule(self.latency, target, pkt)


@dataclass
class RequestTimeline:
    """Device-side stage boundaries for one HTTPS request, in simulator seconds."""
    dns_start: float | None = None
    dns_end: float | None = None
    tcp_start: float | None = None
    tcp_end: float | None = None
    tls_start: float | None = None
    tls_end: float | None = None
    access_start: float | None = None
    access_end: float | None = None

    def stages(self) -> dict[str, float]:
        pairs = {"dns": (self.dns_start, self.dns_end), "tcp": (self.tcp_start, self.tcp_end),
                 "tls": (self.tls_start, self.tls_end), "access": (self.access_start, self.access_end)}
        return {k: b - a for k, (a, b) in pairs.items() if a is not None and b is not None}


@dataclass
class DeviceResult:
    ok: bool
    body: bytes | None
    timeline: RequestTimeline
    error: str | None = None
    tls_version: str | None = None
    syn_tsvals: list[int] = field(default_factory=list)


class EndDevice:
    """One-shot HTTPS client: DNS lookup, TCP connect, TLS, GET, close.

    The TCP side is deliberately small: the LAN never drops or reorders, so
    only in-order delivery and SYN retransmission are modelled.
    """

    def __init__(self, sim: Simulator, lan: Lan, ip: str, tls: TlsEndpoint, *, qname: str,
                 resolver_ip: str = "10.0.0.53", port: int = 443, rng: random.Random | None = None,
                 dns_timeout: float = 60.0, syn_rto: float = 1.0, syn_retries: int = 6,
                 request_timeout: float = 600.0, on_done: Callable[[DeviceResult], None] = lambda r: None):
        self.sim = sim
        self.lan = lan
        self.ip = ip
        self.tls = tls
        self.qname = qname
        self.resolver_ip = resolver_ip
        self.port = port
        self.rng = rng or random.Random(0)
        self.dns_timeout = dns_timeout
        self.syn_rto = syn_rto
        self.syn_retries = syn_retries
        self.request_timeout = request_timeout
        self.on_done = on_done
        self.timeline = RequestTimeline()
        self.result: DeviceResult | None = None
        self.src_port = self.rng.randrange(32768, 61000)
        self.server_ip: str | None = None
        self.txid = self.rng.randrange(1 << 16)
        self.isn = self.rng.randrange(1 << 32)
        self._ts_base = self.rng.randrange(1 << 31)
        self.snd_nxt = 0
        self.rcv_nxt = 0
        self.peer_tsval = 0
        self.syn_tsvals: list[int] = []
        self._timer: Timer | None = None
        self._deadline: Timer | None = None
        self._established = False
        self._get_sent = False
        lan.attach(ip, self.receive)

    def _tsval(self) -> int:
        return (self._ts_base + int(self.sim.now * 1000)) & MASK32

    def _emit(self, pkt: PacketView) -> None:
        self.lan.from_device(pkt)

    def _set_timer(self, delay: float, fn, *args) -> None:
        if self._timer is not None:
            self._timer.cancel()
        self._timer = self.sim.schedule(delay, fn, *args)

    def _fail(self, reason: str) -> None:
        if self.result is not None:
            return
        log.info("device %s failed: %s", self.ip, reason)
        if self.server_ip is not None and self.timeline.tcp_start is not None:
            # abandon the connection so the hub frees its session
            self._emit(tcp_packet(self.ip, self.src_port, self.server_ip, self.port, flags=TcpFlags.RST,
                                  seq=self.snd_nxt))
        self._finish(DeviceResult(False, None, self.timeline, reason, syn_tsvals=self.syn_tsvals))

    def _finish(self, result: DeviceResult) -> None:
        for t in (self._timer, self._deadline):
            if t is not None:
                t.cancel()
        self._timer = self._deadline = None
        self.result = result
        self.on_done(result)

    # -- DNS ------------------------------------------------------------
    def start(self) -> None:
        self._deadline = self.sim.schedule(self.request_timeout, self._fail, "request timed out")
        self.timeline.dns_start = self.sim.now
        self._emit(udp_packet(self.ip, self.src_port - 1, self.resolver_ip, DNS_PORT,
                              dns_query_payload(self.txid, self.qname)))
        self._set_timer(self.dns_timeout, self._fail, "DNS timeout")

    def receive(self, pkt: PacketView) -> None:
        if self.result is not None:
            return
        if pkt.protocol is Protocol.UDP:
            self._on_dns(pkt)
        elif pkt.src_ip == self.server_ip and pkt.dst_port == self.src_port:
            self._on_tcp(pkt)

    def _on_dns(self, pkt: PacketView) -> None:
        if self.server_ip is not None:
            return
        try:
            txid, ip = parse_dns_answer(pkt)
        except PacketError:
            return
        if txid != self.txid or ip is None:
            self._fail("bad DNS answer")
            return
        self.server_ip = ip
        self.timeline.dns_end = self.sim.now
        self._send_syn(0)

    # -- TCP ------------------------------------------------------------
    def _send_syn(self, attempt: int) -> None:
        if attempt > self.syn_retries:
            self._fail("connect timeout")
            return
        if self.timeline.tcp_start is None:
            self.timeline.tcp_start = self.sim.now
        tsval = self._tsval()
        self.syn_tsvals.append(tsval)
        self._emit(tcp_packet(self.ip, self.src_port, self.server_ip, self.port, flags=TcpFlags.SYN,
                              seq=self.isn, options=syn_options(tsval)))
        self._set_timer(self.syn_rto * (2 ** attempt), self._send_syn, attempt + 1)

    def _segment(self, flags: TcpFlags, payload: bytes = b"") -> PacketView:
        pkt = tcp_packet(self.ip, self.src_port, self.server_ip, self.port, flags=flags, seq=self.snd_nxt,
                         ack_no=self.rcv_nxt, payload=payload)
        self.snd_nxt = (self.snd_nxt + len(payload) + bool(flags & (TcpFlags.SYN | TcpFlags.FIN))) & MASK32
        return pkt

    def _on_tcp(self, pkt: PacketView) -> None:
        if pkt.tcp_flags & TcpFlags.RST:
            self._fail("connection reset")
            return
        if not self._established:
            self._on_syn_ack(pkt)
            return
        if pkt.payload:
            if pkt.seq != self.rcv_nxt:
                return
            self.rcv_nxt = (self.rcv_nxt + len(pkt.payload)) & MASK32
            self._on_tls_bytes(pkt.payload)
        if pkt.tcp_flags & TcpFlags.FIN and self.result is None:
            self._fail("server closed before the response arrived")

    def _on_syn_ack(self, pkt: PacketView) -> None:
        if not pkt.has(TcpFlags.SYN | TcpFlags.ACK) or pkt.ack_no != (self.isn + 1) & MASK32:
            return
        ts = pkt.timestamp
        if ts is not None and ts[1] not in self.syn_tsvals:
            # an echo of a value never sent means the handshake was tampered with
            self._fail(f"SYN-ACK echoes TSecr={ts[1]} which was never sent")
            return
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self._established = True
        self.peer_tsval = ts[0] if ts else 0
        self.snd_nxt = (self.isn + 1) & MASK32
        self.rcv_nxt = (pkt.seq + 1) & MASK32
        opts = (timestamp_option(self._tsval(), self.peer_tsval),) if ts else ()
        self._emit(tcp_packet(self.ip, self.src_port, self.server_ip, self.port, flags=TcpFlags.ACK,
                              seq=self.snd_nxt, ack_no=self.rcv_nxt, options=opts))
        self.timeline.tcp_end = self.sim.now
        self.timeline.tls_start = self.sim.now
        self._send_stream(self.tls.start())

    def _send_stream(self, data: bytes, mss: int = 1460) -> None:
        for off in range(0, len(data), mss):
            self._emit(self._segment(TcpFlags.PSH | TcpFlags.ACK, data[off:off + mss]))

    # -- TLS / HTTP -----------------------------------------------------
    def _on_tls_bytes(self, data: bytes) -> None:
        try:
            out = self.tls.feed(data)
        except Exception as exc:  # ssl errors, malformed records
            self._fail(f"TLS failure: {exc}")
            return
        if out:
            self._send_stream(out)
        if self.tls.handshake_done and not self._get_sent:
            self._get_sent = True
            self.timeline.tls_end = self.sim.now
            self.timeline.access_start = self.sim.now
            self._send_stream(self.tls.send_app(http_request(self.qname)))
        body = response_complete(self.tls.received) if self._get_sent else None
        if body is not None:
            self.timeline.access_end = self.sim.now
            self._emit(self._segment(TcpFlags.FIN | TcpFlags.ACK))
            self._finish(DeviceResult(True, body, self.timeline, tls_version=self.tls.version,
                                      syn_tsvals=self.syn_tsvals))


class WebServer:
    """HTTPS origin behind the Net Relay. Serves one fixed JSON body."""

    def __init__(self, sim: Simulator, ip: str, make_tls: Callable[[], TlsEndpoint], *, body: bytes,
                 port: int = 443, rng: random.Random | None = None, send: Callable[[PacketView], None] = lambda p: None):
        self.sim = sim
        self.ip = ip
        self.port = port
        self.make_tls = make_tls
        self.body = body
        self.rng = rng or random.Random(1)
        self.send = send
        self._ts_base = self.rng.randrange(1 << 31)
        self.conns: dict[tuple[str, int], _ServerConn] = {}
        self.syns_seen: list[PacketView] = []
        self.bodies_sent: list[bytes] = []

    def _tsval(self) -> int:
        return (self._ts_base + int(self.sim.now * 1000)) & MASK32

    def receive(self, pkt: PacketView) -> None:
        if pkt.protocol is not Protocol.TCP or pkt.dst_ip != self.ip or pkt.dst_port != self.port:
            return
        key = (pkt.src_ip, pkt.src_port)
        if pkt.has(TcpFlags.SYN) and not pkt.has(TcpFlags.ACK):
            self.syns_seen.append(pkt)
            conn = self.conns.get(key)
            if conn is None:
                conn = self.conns[key] = _ServerConn(self, pkt, self.make_tls())
            conn.send_syn_ack(pkt)
            return
        conn = self.conns.get(key)
        if conn is None:
            return
        if pkt.tcp_flags & TcpFlags.RST:
            del self.conns[key]
            return
        conn.on_segment(pkt)
        if conn.closed:
            del self.conns[key]


class _ServerConn:
    def __init__(self, server: WebServer, syn: PacketView, tls: TlsEndpoint):
        self.server = server
        self.peer = (syn.src_ip, syn.src_port)
        self.tls = tls
        self.isn = server.rng.randrange(1 << 32)
        self.snd_nxt = (self.isn + 1) & MASK32
        self.rcv_nxt = (syn.seq + 1) & MASK32
        self.responded = False
        self.closed = False

    def _out(self, flags: TcpFlags, payload: bytes = b"", seq: int | None = None, options=()) -> None:
        s = self.server
        pkt = tcp_packet(s.ip, s.port, self.peer[0], self.peer[1], flags=flags,
                         seq=self.snd_nxt if seq is None else seq, ack_no=self.rcv_nxt,
                         payload=payload, options=options)
        if seq is None:
            self.snd_nxt = (self.snd_nxt + len(payload) + bool(flags & TcpFlags.FIN)) & MASK32
        s.send(pkt)

    def send_syn_ack(self, syn: PacketView) -> None:
        ts = syn.timestamp
        opts = syn_options(self.server._tsval(), ts[0]) if ts else ()
        self._out(TcpFlags.SYN | TcpFlags.ACK, seq=self.isn, options=opts)

    def on_segment(self, pkt: PacketView) -> None:
        if pkt.payload and pkt.seq == self.rcv_nxt:
            self.rcv_nxt = (self.rcv_nxt + len(pkt.payload)) & MASK32
            out = self.tls.feed(pkt.payload)
            if self.tls.handshake_done and not self.responded and request_complete(self.tls.received):
                self.responded = True
                self.server.bodies_sent.append(self.server.body)
                out += self.tls.send_app(http_response(self.server.body))
            if out:
                for off in range(0, len(out), 1460):
                    self._out(TcpFlags.PSH | TcpFlags.ACK, out[off:off + 1460])
            else:
                self._out(TcpFlags.ACK)
        if pkt.tcp_flags & TcpFlags.FIN:
            self.rcv_nxt = (self.rcv_nxt + 1) & MASK32
            self._out(TcpFlags.FIN | TcpFlags.ACK)
            self.closed = True


class SimUpstream:
    """In-process path between the Net Relay and the web server, plus the relay's resolver."""

    def __init__(self, sim: Simulator, server: WebServer, names: dict[str, str], latency: float = 0.020):
        self.sim = sim
        self.server = server
        self.names = {k.lower().rstrip("."): v for k, v in names.items()}
        self.latency = latency
        self.on_packet: Callable[[bytes], None] = lambda raw: None
        self.sent: list[bytes] = []
        server.send = self._from_server

    def resolve(self, qname: str) -> str:
        try:
            return self.names[qname.lower().rstrip(".")]
        except KeyError:
            raise ResolutionFailed(qname) from None

    def send(self, raw: bytes) -> None:
        self.sent.append(raw)
        try:
            pkt = parse_packet(raw)
        except PacketError:
            return
        self.sim.schedule(self.latency, self.server.receive, pkt)

    def _from_server(self, pkt: PacketView) -> None:
        self.sim.schedule(self.latency, self.on_packet, pkt.raw)
