"""Server-side proxy: rebuilds the TCP handshake toward the web server and relays ciphertext."""

from __future__ import annotations

import enum
import ipaddress
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol as TypingProtocol

from .frame_codec import Failed, MessageKind, OrderedInbox, PayloadMessage, PAYLOAD_ID_MOD
from .fsm import Action, Transition, TraceSink, null_sink
from .link import LinkEndpoint
from .packet_engine import (
    Direction,
    NatMapping,
    NotTlsFraming,
    PacketError,
    PacketView,
    TcpFlags,
    correct_syn_ack_timestamp,
    nat_rewrite,
    parse_packet,
    replace_tsval,
    tcp_packet,
    tls_record_scan,
)
from .sim import Simulator, Timer

log = logging.getLogger(__name__)


class NrState(enum.Enum):
    S0_IDLE_WAIT_DNS = "S0"
    S1_WAIT_SYN = "S1"
    S2_WAIT_ACK = "S2"
    S3_TLS_RELAY = "S3"
    S4_ERROR = "S4"


class NrEventKind(enum.Enum):
    E0_LORA_DNS_QUERY = "e0"
    E1_DNS_FAIL = "e1"
    E2_LORA_SYN = "e2"
    E3_UPSTREAM_SYNACK = "e3"
    E4_SYNACK_FAIL = "e4"
    E5_LORA_FINAL_ACK = "e5"
    E6_LORA_TLS_FRAG = "e6"
    E7_SESSION_END = "e7"


@dataclass(frozen=True)
class NrEvent:
    kind: NrEventKind
    payload: Any = None


class NrAction(enum.Enum):
    RESOLVE = "resolve"
    SEND_LORA = "send_lora"
    REPORT_ERROR = "report_error"
    CLEANUP = "cleanup"
    MODIFY_AND_SEND_SYN = "modify_and_send_syn"
    CORRECT_TIMESTAMP = "correct_timestamp"
    RESET = "reset"
    FORWARD_ACK = "forward_ack"
    SEND_LORA_ACK = "send_lora_ack"
    REASSEMBLE = "reassemble"
    FORWARD_TO_TARGET = "forward_to_target"


S0, S1, S2, S3, S4 = NrState
_E = NrEventKind
_A = NrAction

NR_TABLE: dict[tuple[NrState, NrEventKind], tuple[NrState, tuple]] = {
    (S0, _E.E0_LORA_DNS_QUERY): (S1, ((_A.RESOLVE, None, True), (_A.SEND_LORA, MessageKind.DNS_RESP, False))),
    (S0, _E.E1_DNS_FAIL): (S4, ((_A.REPORT_ERROR, None, True), (_A.CLEANUP, None, False))),
    (S1, _E.E2_LORA_SYN): (S2, ((_A.MODIFY_AND_SEND_SYN, None, True),)),
    (S2, _E.E3_UPSTREAM_SYNACK): (S3, ((_A.CORRECT_TIMESTAMP, None, True), (_A.SEND_LORA, MessageKind.TCP_SYNACK, False))),
    (S2, _E.E4_SYNACK_FAIL): (S0, ((_A.RESET, None, False), (_A.REPORT_ERROR, None, True))),
    (S3, _E.E5_LORA_FINAL_ACK): (S3, ((_A.FORWARD_ACK, None, True),)),
    (S3, _E.E6_LORA_TLS_FRAG): (S3, ((_A.SEND_LORA_ACK, None, False), (_A.REASSEMBLE, None, True),
                                     (_A.FORWARD_TO_TARGET, None, False))),
}
# (any, e7) -> S0 is added for every state below
for _s in NrState:
    NR_TABLE[(_s, _E.E7_SESSION_END)] = (S0, ((_A.REPORT_ERROR, None, True), (_A.CLEANUP, None, False)))


def nr_step(state: NrState, event: NrEvent, session: "NrSession | None" = None) -> tuple[NrState, list[Action]]:
    row = NR_TABLE.get((state, event.kind))
    if row is None:
        return S4, [Action(_A.CLEANUP)]
    nxt, templates = row
    return nxt, [Action(a, mk, event.payload if carries else None) for a, mk, carries in templates]


def nr_recover(state: NrState) -> NrState:
    return S0 if state is S4 else state


class HandshakePhase(enum.Enum):
    """The handshake position as the reconstruction procedure tracks it."""
    WAIT_SYN = "WAIT_SYN"
    WAIT_ACK = "WAIT_ACK"
    TLS_RELAY = "TLS_RELAY"


class ResolutionFailed(LookupError):
    pass


class UpstreamClosed(ConnectionError):
    pass


class Resolver(TypingProtocol):
    def resolve(self, qname: str) -> str: ...


class StaticResolver:
    def __init__(self, table: dict[str, str]):
        self.table = {k.lower().rstrip("."): v for k, v in table.items()}

    def resolve(self, qname: str) -> str:
        try:
            return self.table[qname.lower().rstrip(".")]
        except KeyError:
            raise ResolutionFailed(qname) from None


def resolve_domain(qname: str, resolver: Resolver) -> str:
    if not qname:
        raise ResolutionFailed("empty name")
    answer = resolver.resolve(qname)
    if isinstance(answer, (list, tuple)):
        if not answer:
            raise ResolutionFailed(qname)
        answer = answer[0]
    return str(ipaddress.IPv4Address(answer))


class UpstreamPort(TypingProtocol):
    """Packet path to the web server plus name resolution.

    The relay sets ``on_packet``; the port calls it for every packet the
    server sends back.
    """
    on_packet: Callable[[bytes], None]

    def resolve(self, qname: str) -> str: ...

    def send(self, raw: bytes) -> None: ...


class SynExchanger(TypingProtocol):
    """Blocking upstream used by :func:`handle_handshake_message`."""

    def syn_to_server_await_response(self, syn: bytes, timeout: float) -> bytes | None: ...

    def forward(self, raw: bytes) -> None: ...


@dataclass
class NrSession:
    session_id: int
    state: NrState = S0
    phase: HandshakePhase = HandshakePhase.WAIT_SYN
    qname: str | None = None
    target_ip: str | None = None
    target_port: int = 443
    nat: NatMapping | None = None
    tsval_orig: int | None = None
    relay_tsval: int = 0
    snd_nxt: int = 0      # next sequence number toward the server
    rcv_nxt: int = 0      # next sequence number expected from the server
    inbox: OrderedInbox = field(default_factory=OrderedInbox)
    next_tx_id: int = 0
    down_buffer: bytes = b""
    timer: Timer | None = None
    bytes_up: int = 0
    bytes_down: int = 0
    upstream_opened: bool = False
    created_at: float = 0.0
    pending_lora: bytes = b""
    last_activity: float = 0.0
    idle_timer: Timer | None = None
    pending_up: list = field(default_factory=list)
    resolving: bool = False
    deferred: list = field(default_factory=list)   # messages held while a lookup is in flight

    def take_payload_id(self) -> int:
        pid = self.next_tx_id
        self.next_tx_id = (pid + 1) % PAYLOAD_ID_MOD
        return pid


def prepare_upstream_syn(syn: PacketView, nat: NatMapping, relay_tsval: int) -> PacketView:
    """NAT the client's SYN to the relay address and stamp it with the relay's own TSval."""
    out = nat_rewrite(syn, nat, Direction.OUTBOUND)
    if out.timestamp is not None:
        out = replace_tsval(out, relay_tsval)
    return out


def finish_syn_ack(syn_ack: PacketView, nat: NatMapping, tsval_orig: int | None) -> PacketView:
    if tsval_orig is not None:
        syn_ack = correct_syn_ack_timestamp(syn_ack, tsval_orig)
    return nat_rewrite(syn_ack, nat, Direction.INBOUND)


@dataclass(frozen=True)
class Success:
    to_lora: PacketView | None = None


@dataclass(frozen=True)
class Failure:
    reason: str
    event: NrEventKind | None = None


ReconstructionResult = Success | Failure


def handle_handshake_message(message: PayloadMessage, session: NrSession, upstream: SynExchanger,
                             timeout: float = 10.0) -> ReconstructionResult:
    """Blocking handshake reconstruction for one LoRa message.

    In WAIT_SYN a SYN is sent upstream and the answer is corrected and
    returned for the LoRa link; in WAIT_ACK the final ACK is forwarded and
    the session moves to TLS relaying.
    """
    if session.phase is HandshakePhase.WAIT_SYN and message.kind is MessageKind.TCP_SYN:
        try:
            syn = parse_packet(message.data)
        except PacketError as exc:
            return Failure(f"bad SYN: {exc}")
        ts = syn.timestamp
        session.tsval_orig = ts[0] if ts else None
        if session.nat is None:
            return Failure("no NAT mapping for session")
        out = prepare_upstream_syn(syn, session.nat, session.relay_tsval)
        session.snd_nxt = (syn.seq + 1) & 0xFFFFFFFF
        session.upstream_opened = True
        reply = upstream.syn_to_server_await_response(out.raw, timeout)
        if reply is None:
            return Failure("no SYN-ACK from server", NrEventKind.E4_SYNACK_FAIL)
        try:
            synack = parse_packet(reply)
            corrected = finish_syn_ack(synack, session.nat, session.tsval_orig)
        except PacketError as exc:
            return Failure(f"bad SYN-ACK: {exc}", NrEventKind.E4_SYNACK_FAIL)
        session.rcv_nxt = (synack.seq + 1) & 0xFFFFFFFF
        session.phase = HandshakePhase.WAIT_ACK
        return Success(corrected)
    if session.phase is HandshakePhase.WAIT_ACK and message.kind is MessageKind.TCP_ACK:
        try:
            ack = parse_packet(message.data)
            upstream.forward(nat_rewrite(ack, session.nat, Direction.OUTBOUND).raw)
        except PacketError as exc:
            return Failure(f"bad ACK: {exc}")
        session.phase = HandshakePhase.TLS_RELAY
        return Success()
    return Failure(f"{message.kind.name} unexpected in {session.phase.value}")


def relay_upstream(message: PayloadMessage, session: NrSession, mss: int = 1460) -> list[PacketView]:
    """LoRa ciphertext -> TCP segments toward the server, in order."""
    if session.state is not S3 or session.nat is None:
        raise UpstreamClosed(f"session {session.session_id} is not relaying")
    nat = session.nat
    out = []
    for off in range(0, len(message.data), mss):
        piece = message.data[off:off + mss]
        out.append(tcp_packet(nat.relay_ip, nat.relay_port, session.target_ip, session.target_port,
                              flags=TcpFlags.PSH | TcpFlags.ACK, seq=session.snd_nxt, ack_no=session.rcv_nxt,
                              payload=piece))
        session.snd_nxt = (session.snd_nxt + len(piece)) & 0xFFFFFFFF
    session.bytes_up += len(message.data)
    return out


def relay_downstream(data: bytes, session: NrSession) -> list[PayloadMessage]:
    """Server ciphertext -> one TLS_DATA message per complete record."""
    records, session.down_buffer = tls_record_scan(session.down_buffer + data)
    msgs = []
    for rec in records:
        msgs.append(PayloadMessage(session.take_payload_id(), MessageKind.TLS_DATA, session.session_id, rec))
        session.bytes_down += len(rec)
    return msgs


class NetRelay:
    """Net Relay runtime on the simulator thread.

    LoRa messages are dispatched per session in payload-id order. Packets from
    the server arrive through ``upstream.on_packet`` and are matched to a
    session by the relay port that the NAT handed out.
    """

    node = "NR"

    def __init__(self, sim: Simulator, link: LinkEndpoint, upstream: UpstreamPort, *, relay_ip: str,
                 resolver_latency: float = 0.030, syn_ack_timeout: float = 10.0, mss: int = 1460,
                 port_base: int = 40000, ts_offset: int = 0, dns_session_ttl: float = 120.0,
                 idle_timeout: float = 300.0, trace: TraceSink = null_sink):
        self.sim = sim
        self.link = link
        self.upstream = upstream
        self.relay_ip = relay_ip
        self.resolver_latency = resolver_latency
        self.syn_ack_timeout = syn_ack_timeout
        self.mss = mss
        self.ts_offset = ts_offset
        self.dns_session_ttl = dns_session_ttl
        self.idle_timeout = idle_timeout
        self.trace = trace
        self.sessions: dict[int, NrSession] = {}
        self.by_port: dict[int, NrSession] = {}
        self.errors: list[str] = []
        self.upstream_connects = 0
        self._port_base = port_base
        self._next_port = port_base
        link.on_message = self.on_lora_message
        link.on_result = self._on_link_result
        upstream.on_packet = self.on_upstream_packet

    def _tsval(self) -> int:
        return (int(self.sim.now * 1000) + self.ts_offset) & 0xFFFFFFFF

    def _alloc_port(self) -> int:
        for _ in range(20000):
            port = self._next_port
            self._next_port = self._port_base + (port - self._port_base + 1) % 20000
            if port not in self.by_port:
                return port
        raise RuntimeError("relay port range exhausted")

    def _step(self, session: NrSession, event: NrEvent) -> None:
        before = session.state
        after, actions = nr_step(before, event, session)
        session.state = after
        self.trace(Transition(self.sim.now, self.node, session.session_id, before.value, event.kind.value,
                              after.value, tuple(a.describe() for a in actions)).to_json())
        if after is S4 and (before, event.kind) not in NR_TABLE:
            self._report(session, f"{event.kind.value} not valid in {before.value}")
        for action in actions:
            self._execute(session, action)
        if session.state is S4:
            session.state = nr_recover(S4)
            self.trace(Transition(self.sim.now, self.node, session.session_id, S4.value, "reset",
                                  session.state.value, ()).to_json())

    def _send_lora(self, session: NrSession, kind: MessageKind, data: bytes) -> None:
        self.link.send(PayloadMessage(session.take_payload_id(), kind, session.session_id, data))

    def _report(self, session: NrSession, reason: str) -> None:
        self.errors.append(f"session {session.session_id}: {reason}")
        log.warning("NR session %d: %s", session.session_id, reason)
        self._send_lora(session, MessageKind.ERROR, reason.encode())

    # -- LoRa side ------------------------------------------------------
    def on_lora_message(self, message: PayloadMessage) -> None:
        session = self.sessions.get(message.session_id)
        ending = message.kind in (MessageKind.FIN, MessageKind.ERROR)
        if session is None:
            if ending:
                return  # already gone here
            if message.kind not in (MessageKind.DNS_QUERY, MessageKind.TCP_SYN):
                self.errors.append(f"session {message.session_id}: {message.kind.name} for unknown session")
                self.link.send(PayloadMessage(0, MessageKind.ERROR, message.session_id, b"unknown session"))
                return
            session = NrSession(message.session_id, created_at=self.sim.now)
            self.sessions[session.session_id] = session
        self._touch(session)
        if ending:
            self._dispatch(session, message)
            return
        self._deliver(session, session.inbox.push(message))

    def _deliver(self, session: NrSession, messages: list[PayloadMessage]) -> None:
        for i, msg in enumerate(messages):
            if self.sessions.get(msg.session_id) is not session:
                break
            if session.resolving:
                session.deferred.extend(messages[i:])
                break
            self._dispatch(session, msg)

    def _on_link_result(self, message: PayloadMessage, result) -> None:
        if not isinstance(result, Failed) or message.kind in (MessageKind.FIN, MessageKind.ERROR):
            return
        session = self.sessions.get(message.session_id)
        if session is not None:
            self.errors.append(f"session {session.session_id}: {message.kind.name} undeliverable over LoRa")
            self._step(session, NrEvent(_E.E7_SESSION_END, "peer"))  # nothing more can reach the hub

    def _dispatch(self, session: NrSession, msg: PayloadMessage) -> None:
        kind = msg.kind
        if kind is MessageKind.DNS_QUERY:
            session.qname = msg.data.decode(errors="replace")
            session.resolving = True
            self.sim.schedule(self.resolver_latency, self._resolved, session)
            return
        if kind is MessageKind.TCP_SYN:
            event = NrEvent(_E.E2_LORA_SYN, msg.data)
        elif kind is MessageKind.TCP_ACK:
            event = NrEvent(_E.E5_LORA_FINAL_ACK, msg.data)
        elif kind is MessageKind.TLS_DATA:
            event = NrEvent(_E.E6_LORA_TLS_FRAG, msg)
        elif kind in (MessageKind.FIN, MessageKind.ERROR):
            event = NrEvent(_E.E7_SESSION_END, "peer")
        else:
            event = NrEvent(_E.E7_SESSION_END, f"unexpected {kind.name}")
        self._step(session, event)

    def _resolved(self, session: NrSession) -> None:
        session.resolving = False
        if self.sessions.get(session.session_id) is not session:
            return
        try:
            ip = resolve_domain(session.qname or "", self.upstream)
        except (ResolutionFailed, ValueError) as exc:
            self._step(session, NrEvent(_E.E1_DNS_FAIL, f"cannot resolve {session.qname!r}: {exc}"))
            return
        self._step(session, NrEvent(_E.E0_LORA_DNS_QUERY, ip))
        self.sim.schedule(self.dns_session_ttl, self._expire_dns_session, session)
        held, session.deferred = session.deferred, []
        self._deliver(session, held)

    def _expire_dns_session(self, session: NrSession) -> None:
        if self.sessions.get(session.session_id) is session and session.state is S1:
            self._drop(session)

    def _touch(self, session: NrSession) -> None:
        session.last_activity = self.sim.now
        if session.idle_timer is None:
            session.idle_timer = self.sim.schedule(self.idle_timeout, self._idle_check, session)

    def _idle_check(self, session: NrSession) -> None:
        session.idle_timer = None
        if self.sessions.get(session.session_id) is not session:
            return
        quiet_until = session.last_activity + self.idle_timeout
        if self.sim.now < quiet_until:
            session.idle_timer = self.sim.at(quiet_until, self._idle_check, session)
            return
        self._step(session, NrEvent(_E.E7_SESSION_END, f"idle for {self.idle_timeout}s"))

    # -- upstream side --------------------------------------------------
    def on_upstream_packet(self, raw: bytes) -> None:
        try:
            pkt = parse_packet(raw)
        except PacketError as exc:
            log.debug("NR drops unparsable upstream packet: %s", exc)
            return
        session = self.by_port.get(pkt.dst_port)
        if session is None or pkt.dst_ip != self.relay_ip:
            return
        self._touch(session)
        if pkt.has(TcpFlags.SYN | TcpFlags.ACK):
            if session.state is S2:
                self._step(session, NrEvent(_E.E3_UPSTREAM_SYNACK, pkt))
            return
        if pkt.tcp_flags & TcpFlags.RST:
            self._step(session, NrEvent(_E.E7_SESSION_END, "upstream reset"))
            return
        if pkt.payload and session.state is S3 and pkt.seq == session.rcv_nxt:
            session.rcv_nxt = (pkt.seq + len(pkt.payload)) & 0xFFFFFFFF
            try:
                messages = relay_downstream(pkt.payload, session)
            except NotTlsFraming as exc:
                self._step(session, NrEvent(_E.E7_SESSION_END, f"server stream corrupt: {exc}"))
                return
            self._ack_server(session)
            for m in messages:
                self.link.send(m)
        if pkt.tcp_flags & TcpFlags.FIN and session.state is S3:
            session.rcv_nxt = (session.rcv_nxt + 1) & 0xFFFFFFFF
            self._step(session, NrEvent(_E.E7_SESSION_END, "upstream"))

    def _ack_server(self, session: NrSession, flags: TcpFlags = TcpFlags.ACK) -> None:
        nat = session.nat
        self.upstream.send(tcp_packet(nat.relay_ip, nat.relay_port, session.target_ip, session.target_port,
                                      flags=flags, seq=session.snd_nxt, ack_no=session.rcv_nxt).raw)

    def _syn_ack_timeout(self, session: NrSession) -> None:
        session.timer = None
        if self.sessions.get(session.session_id) is session and session.state is S2:
            self._step(session, NrEvent(_E.E4_SYNACK_FAIL, f"no SYN-ACK within {self.syn_ack_timeout}s"))

    # -- actions --------------------------------------------------------
    def _execute(self, session: NrSession, action: Action) -> None:
        kind = action.kind
        if kind is _A.RESOLVE:
            session.target_ip = action.data
        elif kind is _A.SEND_LORA:
            if action.message_kind is MessageKind.DNS_RESP:
                self._send_lora(session, MessageKind.DNS_RESP, ipaddress.IPv4Address(session.target_ip).packed)
            else:
                self._send_lora(session, action.message_kind, session.pending_lora)
                session.pending_lora = b""
        elif kind is _A.MODIFY_AND_SEND_SYN:
            self._open_upstream(session, action.data)
        elif kind is _A.CORRECT_TIMESTAMP:
            synack: PacketView = action.data
            if session.timer is not None:
                session.timer.cancel()
                session.timer = None
            session.rcv_nxt = (synack.seq + 1) & 0xFFFFFFFF
            session.pending_lora = finish_syn_ack(synack, session.nat, session.tsval_orig).raw
            session.phase = HandshakePhase.WAIT_ACK
        elif kind is _A.FORWARD_ACK:
            ack = parse_packet(action.data)
            self.upstream.send(nat_rewrite(ack, session.nat, Direction.OUTBOUND).raw)
            session.phase = HandshakePhase.TLS_RELAY
        elif kind is _A.SEND_LORA_ACK:
            pass  # chunk ACKs already went out from the link layer
        elif kind is _A.REASSEMBLE:
            session.pending_up = relay_upstream(action.data, session, self.mss)
        elif kind is _A.FORWARD_TO_TARGET:
            for seg in session.pending_up:
                self.upstream.send(seg.raw)
            session.pending_up = []
        elif kind is _A.RESET:
            if session.timer is not None:
                session.timer.cancel()
                session.timer = None
            if session.upstream_opened:
                self._ack_server(session, TcpFlags.RST)
        elif kind is _A.REPORT_ERROR:
            self._report_end(session, action.data)
        elif kind is _A.CLEANUP:
            self._cleanup(session)

    def _open_upstream(self, session: NrSession, raw_syn: bytes) -> None:
        syn = parse_packet(raw_syn)
        ts = syn.timestamp
        session.tsval_orig = ts[0] if ts else None
        if session.target_ip is None:
            session.target_ip = syn.dst_ip
        session.target_port = syn.dst_port
        port = self._alloc_port()
        session.nat = NatMapping(syn.src_ip, syn.src_port, self.relay_ip, port)
        self.by_port[port] = session
        session.relay_tsval = self._tsval()
        out = prepare_upstream_syn(syn, session.nat, session.relay_tsval)
        session.snd_nxt = (syn.seq + 1) & 0xFFFFFFFF
        session.upstream_opened = True
        self.upstream_connects += 1
        session.timer = self.sim.schedule(self.syn_ack_timeout, self._syn_ack_timeout, session)
        self.upstream.send(out.raw)

    def _report_end(self, session: NrSession, reason) -> None:
        if reason == "peer":
            return  # the End Hub started the teardown, nothing to tell it
        if reason == "upstream":
            self._send_lora(session, MessageKind.FIN, b"close")
            return
        self._report(session, str(reason))
        if session.state is S0 and session.nat is not None:
            self._drop(session)  # e4 lands in S0 without a cleanup row

    def _cleanup(self, session: NrSession) -> None:
        if session.upstream_opened and session.state is not S4 and session.nat is not None:
            if self.sessions.get(session.session_id) is session:
                self._ack_server(session, TcpFlags.FIN | TcpFlags.ACK)
        self._drop(session)

    def _drop(self, session: NrSession) -> None:
        for name in ("timer", "idle_timer"):
            t = getattr(session, name)
            if t is not None:
                t.cancel()
                setattr(session, name, None)
        if self.sessions.get(session.session_id) is session:
            del self.sessions[session.session_id]
        if session.nat is not None and self.by_port.get(session.nat.relay_port) is session:
            del self.by_port[session.nat.relay_port]
