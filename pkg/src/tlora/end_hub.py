"""Client-side proxy: sniffs end-device traffic and tunnels it over LoRa.

``eh_step`` is the pure transition table; :class:`EndHub` is the runtime
that feeds it events from the virtual LAN, the LoRa link and its timers.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .frame_codec import Failed, MessageKind, OrderedInbox, PayloadMessage, PAYLOAD_ID_MOD
from .fsm import Action, Transition, TraceSink, null_sink
from .link import LinkEndpoint
from .packet_engine import (
    NatMapping,
    NotDns,
    NotTlsFraming,
    PacketError,
    PacketView,
    Protocol,
    TcpFlags,
    build_dns_response,
    extract_dns_query,
    parse_packet,
    tcp_packet,
    tls_record_scan,
)
from .sentinel import Decision, Sentinel
from .sim import Simulator, Timer

log = logging.getLogger(__name__)


class EhState(enum.Enum):
    C0_IDLE = "C0"
    C1_WAIT_DNS_RESP = "C1"
    C2_WAIT_SYN_ACK = "C2"
    C3_TLS_RELAY = "C3"
    C4_ERROR = "C4"


class EhEventKind(enum.Enum):
    E0_DNS_QUERY = "e0"
    E1_DNS_IP_RESP = "e1"
    E2_LOCAL_SYN = "e2"
    E3_SYNACK_RECVD = "e3"
    E4_SYNACK_TIMEOUT = "e4"
    E5_LOCAL_TLS_OUT = "e5"
    E6_LORA_TLS_IN = "e6"
    E7_LORA_FRAG_ACK = "e7"
    E8_SESSION_END = "e8"


@dataclass(frozen=True)
class EhEvent:
    kind: EhEventKind
    payload: Any = None


class EhAction(enum.Enum):
    SEND_LORA = "send_lora"
    SPOOF_DNS = "spoof_dns"
    FORWARD_TO_CLIENT = "forward_to_client"
    SEND_FINAL_ACK = "send_final_ack"
    SEND_FIN_ACK_TO_CLIENT = "send_fin_ack_to_client"
    LOG_ERROR = "log_error"
    CHUNK_AND_SEND = "chunk_and_send"
    REASSEMBLE_AND_FORWARD = "reassemble_and_forward"
    CLEANUP = "cleanup"


C0, C1, C2, C3, C4 = EhState
_E = EhEventKind
_A = EhAction

# (state, event) -> (next state, action templates); a template is
# (action, message kind, carries the event payload)
EH_TABLE: dict[tuple[EhState, EhEventKind], tuple[EhState, tuple]] = {
    (C0, _E.E0_DNS_QUERY): (C1, ((_A.SEND_LORA, MessageKind.DNS_QUERY, True),)),
    (C1, _E.E1_DNS_IP_RESP): (C0, ((_A.SPOOF_DNS, None, True),)),
    (C0, _E.E2_LOCAL_SYN): (C2, ((_A.SEND_LORA, MessageKind.TCP_SYN, True),)),
    (C2, _E.E3_SYNACK_RECVD): (C3, ((_A.FORWARD_TO_CLIENT, None, True), (_A.SEND_FINAL_ACK, MessageKind.TCP_ACK, False))),
    (C2, _E.E4_SYNACK_TIMEOUT): (C0, ((_A.SEND_FIN_ACK_TO_CLIENT, None, False), (_A.LOG_ERROR, None, False))),
    (C3, _E.E5_LOCAL_TLS_OUT): (C3, ((_A.CHUNK_AND_SEND, MessageKind.TLS_DATA, True),)),
    (C3, _E.E6_LORA_TLS_IN): (C3, ((_A.REASSEMBLE_AND_FORWARD, None, True),)),
    (C3, _E.E8_SESSION_END): (C4, ((_A.SEND_FIN_ACK_TO_CLIENT, None, False), (_A.CLEANUP, None, False))),
}


def eh_step(state: EhState, event: EhEvent, session: "SessionRecord | None" = None) -> tuple[EhState, list[Action]]:
    """One End Hub transition. Pairs missing from the table go to C4 with a cleanup."""
    row = EH_TABLE.get((state, event.kind))
    if row is None:
        return C4, [Action(_A.CLEANUP)]
    nxt, templates = row
    return nxt, [Action(a, mk, event.payload if carries else None) for a, mk, carries in templates]


def eh_recover(state: EhState) -> EhState:
    """The error state always falls back to idle once cleanup has run."""
    return C0 if state is C4 else state


class SessionUnknown(LookupError):
    pass


class StreamCorrupt(ValueError):
    pass


@dataclass
class SessionRecord:
    session_id: int
    client_ip: str
    client_port: int = 0
    target_ip: str | None = None
    target_port: int = 0
    state: EhState = C0
    tsval_orig: int | None = None
    nat: NatMapping | None = None
    syn_ack_deadline: float | None = None
    created_at: float = 0.0
    stage_timestamps: dict[str, float] = field(default_factory=dict)
    # runtime bookkeeping
    qname: str | None = None
    dns_query: PacketView | None = None
    syn_packet: PacketView | None = None
    admitted: bool = False
    next_tx_id: int = 0
    inbox: OrderedInbox = field(default_factory=OrderedInbox)
    uplink_buffer: bytes = b""
    client_next_seq: int = 0
    server_next_seq: int = 0
    awaiting_client_ack: bool = False
    timer: Timer | None = None
    bytes_up: int = 0
    bytes_down: int = 0

    def take_payload_id(self) -> int:
        pid = self.next_tx_id
        self.next_tx_id = (pid + 1) % PAYLOAD_ID_MOD
        return pid

    @property
    def flow(self) -> tuple[str, int, str | None, int]:
        return (self.client_ip, self.client_port, self.target_ip, self.target_port)


def relay_uplink(tls_bytes: bytes, session: SessionRecord) -> list[PayloadMessage]:
    """Buffer client ciphertext and cut it into one message per complete TLS record."""
    if session.state is not C3:
        raise SessionUnknown(f"session {session.session_id} is not relaying")
    try:
        records, rest = tls_record_scan(session.uplink_buffer + tls_bytes)
    except NotTlsFraming as exc:
        raise StreamCorrupt(str(exc)) from exc
    session.uplink_buffer = rest
    out = []
    for rec in records:
        out.append(PayloadMessage(session.take_payload_id(), MessageKind.TLS_DATA, session.session_id, rec))
        session.bytes_up += len(rec)
    return out


def relay_downlink(message: PayloadMessage, session: SessionRecord | None, mss: int = 1460) -> list[PacketView]:
    """Wrap relayed ciphertext into TCP segments addressed to the end device."""
    if session is None or session.state is not C3 or session.target_ip is None:
        raise SessionUnknown(f"no relaying session for message {message.session_id}/{message.payload_id}")
    if message.kind is not MessageKind.TLS_DATA:
        raise ValueError(f"relay_downlink takes TLS_DATA, got {message.kind.name}")
    segments = []
    data = message.data
    for off in range(0, len(data), mss):
        piece = data[off:off + mss]
        segments.append(tcp_packet(session.target_ip, session.target_port, session.client_ip, session.client_port,
                                   flags=TcpFlags.PSH | TcpFlags.ACK, seq=session.server_next_seq,
                                   ack_no=session.client_next_seq, payload=piece))
        session.server_next_seq = (session.server_next_seq + len(piece)) & 0xFFFFFFFF
    session.bytes_down += len(data)
    return segments


@dataclass(frozen=True)
class Started:
    session: SessionRecord


@dataclass(frozen=True)
class Dropped:
    reason: str


HandshakeOutcome = Started | Dropped


class EndHub:
    """End Hub runtime. All calls happen on the simulator's single thread."""

    node = "EH"

    def __init__(self, sim: Simulator, link: LinkEndpoint, sentinel: Sentinel,
                 lan_send: Callable[[PacketView], None], *, syn_ack_timeout: float = 30.0,
                 dns_session_ttl: float = 120.0, mss: int = 1460, trace: TraceSink = null_sink):
        self.sim = sim
        self.link = link
        self.sentinel = sentinel
        self.lan_send = lan_send
        self.syn_ack_timeout = syn_ack_timeout
        self.dns_session_ttl = dns_session_ttl
        self.mss = mss
        self.trace = trace
        self.sessions: dict[int, SessionRecord] = {}
        self.session_queue: deque[PacketView] = deque()
        self.errors: list[str] = []
        self._next_sid = 1
        link.on_message = self.on_lora_message
        link.on_result = self._on_link_result

    # -- helpers --------------------------------------------------------
    def _alloc_sid(self) -> int:
        for _ in range(255):
            sid = self._next_sid
            self._next_sid = sid % 255 + 1
            if sid not in self.sessions:
                return sid
        raise RuntimeError("all 255 session ids are in use")

    def _step(self, session: SessionRecord, event: EhEvent) -> list[Action]:
        before = session.state
        after, actions = eh_step(before, event, session)
        session.state = after
        self.trace(Transition(self.sim.now, self.node, session.session_id, before.value, event.kind.value,
                              after.value, tuple(a.describe() for a in actions)).to_json())
        for action in actions:
            self._execute(session, action)
        if session.state is C4:
            session.state = eh_recover(C4)
            self.trace(Transition(self.sim.now, self.node, session.session_id, C4.value, "reset",
                                  session.state.value, ()).to_json())
        return actions

    def _send_lora(self, session: SessionRecord, kind: MessageKind, data: bytes) -> None:
        self.link.send(PayloadMessage(session.take_payload_id(), kind, session.session_id, data))

    def _find_flow(self, packet: PacketView) -> SessionRecord | None:
        key = (packet.src_ip, packet.src_port, packet.dst_ip, packet.dst_port)
        for s in self.sessions.values():
            if s.client_port and s.flow == key:
                return s
        return None

    def _dns_session_for(self, packet: PacketView) -> SessionRecord | None:
        for s in self.sessions.values():
            if (s.state is C0 and not s.client_port and s.client_ip == packet.src_ip
                    and s.target_ip == packet.dst_ip):
                return s
        return None

    # -- LAN side -------------------------------------------------------
    def on_lan_packet(self, raw: bytes | PacketView) -> None:
        try:
            pkt = raw if isinstance(raw, PacketView) else parse_packet(raw)
        except PacketError as exc:
            log.debug("EH drops unparsable LAN packet: %s", exc)
            return
        if pkt.protocol is Protocol.UDP:
            self._on_dns_query(pkt)
            return
        if pkt.has(TcpFlags.SYN) and not pkt.has(TcpFlags.ACK):
            self.handle_client_syn(pkt)
            return
        session = self._find_flow(pkt)
        if session is None:
            return
        if pkt.tcp_flags & (TcpFlags.FIN | TcpFlags.RST):
            session.client_next_seq = (pkt.seq + len(pkt.payload) + 1) & 0xFFFFFFFF
            session.stage_timestamps.setdefault("client_fin", self.sim.now)
            self._step(session, EhEvent(_E.E8_SESSION_END, "client"))
            return
        if session.state is C3 and session.awaiting_client_ack and not pkt.payload:
            # second half of SEND_FINAL_ACK: the captured ACK goes over LoRa
            session.awaiting_client_ack = False
            session.stage_timestamps["final_ack_forwarded"] = self.sim.now
            self._send_lora(session, MessageKind.TCP_ACK, pkt.raw)
            return
        if pkt.payload:
            self._step(session, EhEvent(_E.E5_LOCAL_TLS_OUT, pkt))

    def _on_dns_query(self, pkt: PacketView) -> None:
        try:
            _txid, qname = extract_dns_query(pkt)
        except NotDns:
            return
        except PacketError as exc:
            log.info("EH ignores DNS query: %s", exc)
            return
        session = SessionRecord(self._alloc_sid(), pkt.src_ip, created_at=self.sim.now, qname=qname, dns_query=pkt)
        session.stage_timestamps["dns_query"] = self.sim.now
        self.sessions[session.session_id] = session
        self._step(session, EhEvent(_E.E0_DNS_QUERY, qname))
        self.sim.schedule(self.dns_session_ttl, self._expire_dns_session, session)

    def _expire_dns_session(self, session: SessionRecord) -> None:
        if self.sessions.get(session.session_id) is session and not session.client_port:
            del self.sessions[session.session_id]

    def handle_client_syn(self, syn: PacketView) -> HandshakeOutcome:
        existing = self._find_flow(syn)
        if existing is not None:
            return Dropped("duplicate")  # client SYN retransmission while in flight
        decision = self.sentinel.admit(self.sim.now)
        self.trace({"kind": "sentinel", "t": self.sim.now, "node": self.node, "client": syn.src_ip,
                    "decision": decision.value})
        if decision is not Decision.ADMITTED:
            return Dropped(decision.value)
        session = self._dns_session_for(syn)
        if session is None:
            session = SessionRecord(self._alloc_sid(), syn.src_ip, created_at=self.sim.now)
            self.sessions[session.session_id] = session
        session.client_port, session.target_ip, session.target_port = syn.src_port, syn.dst_ip, syn.dst_port
        session.admitted = True
        session.syn_packet = syn
        session.client_next_seq = (syn.seq + 1) & 0xFFFFFFFF
        ts = syn.timestamp
        session.tsval_orig = ts[0] if ts else None
        session.stage_timestamps["syn"] = self.sim.now
        self.session_queue.append(syn)
        w_s = self.session_queue.popleft()
        self._step(session, EhEvent(_E.E2_LOCAL_SYN, w_s.raw))
        session.syn_ack_deadline = self.sim.now + self.syn_ack_timeout
        session.timer = self.sim.at(session.syn_ack_deadline, self._syn_ack_timeout, session)
        return Started(session)

    def _syn_ack_timeout(self, session: SessionRecord) -> None:
        session.timer = None
        if session.state is not C2 or self.sessions.get(session.session_id) is not session:
            return
        session.syn_ack_deadline = None
        self._step(session, EhEvent(_E.E4_SYNACK_TIMEOUT))
        self._teardown(session, notify_peer=True)

    # -- LoRa side ------------------------------------------------------
    def on_lora_message(self, message: PayloadMessage) -> None:
        session = self.sessions.get(message.session_id)
        ending = message.kind in (MessageKind.FIN, MessageKind.ERROR)
        if session is None:
            log.info("EH drops %s for unknown session %d", message.kind.name, message.session_id)
            if not ending:
                # the relay still thinks this session is alive; tell it otherwise
                self.link.send(PayloadMessage(0, MessageKind.FIN, message.session_id, b"unknown session"))
            return
        if ending:
            # session-ending messages skip the in-order queue
            self._dispatch(session, message)
            return
        for msg in session.inbox.push(message):
            if self.sessions.get(msg.session_id) is not session:
                break
            self._dispatch(session, msg)

    def _on_link_result(self, message: PayloadMessage, result) -> None:
        if not isinstance(result, Failed) or message.kind is MessageKind.FIN:
            return
        session = self.sessions.get(message.session_id)
        if session is None:
            return
        self.errors.append(f"session {session.session_id}: {message.kind.name} undeliverable over LoRa")
        session.stage_timestamps["link_failed"] = self.sim.now
        if session.state is C3:
            self._step(session, EhEvent(_E.E8_SESSION_END, "link"))
        else:
            self._teardown(session, notify_peer=False)

    def _dispatch(self, session: SessionRecord, msg: PayloadMessage) -> None:
        kind = msg.kind
        if kind is MessageKind.DNS_RESP:
            event = EhEvent(_E.E1_DNS_IP_RESP, msg.data)
        elif kind is MessageKind.TCP_SYNACK:
            event = EhEvent(_E.E3_SYNACK_RECVD, msg.data)
        elif kind is MessageKind.TLS_DATA:
            event = EhEvent(_E.E6_LORA_TLS_IN, msg)
        elif kind in (MessageKind.FIN, MessageKind.ERROR):
            event = EhEvent(_E.E8_SESSION_END, "peer")
            session.stage_timestamps["peer_end"] = self.sim.now
            if kind is MessageKind.ERROR:
                self.errors.append(msg.data.decode(errors="replace"))
        else:
            event = EhEvent(_E.E7_LORA_FRAG_ACK, msg)  # not expected on this side
        self._step(session, event)

    # -- actions --------------------------------------------------------
    def _execute(self, session: SessionRecord, action: Action) -> None:
        kind = action.kind
        if kind is _A.SEND_LORA:
            data = action.data.encode() if isinstance(action.data, str) else action.data
            self._send_lora(session, action.message_kind, data)
        elif kind is _A.SPOOF_DNS:
            ip = ".".join(str(b) for b in action.data[:4])
            session.target_ip = ip
            session.stage_timestamps["dns_spoofed"] = self.sim.now
            self.lan_send(build_dns_response(session.dns_query, ip))
        elif kind is _A.FORWARD_TO_CLIENT:
            if session.timer is not None:
                session.timer.cancel()
                session.timer = None
            session.syn_ack_deadline = None
            synack = parse_packet(action.data)
            session.server_next_seq = (synack.seq + 1) & 0xFFFFFFFF
            session.stage_timestamps["syn_ack"] = self.sim.now
            session.awaiting_client_ack = True
            self.lan_send(synack)
        elif kind is _A.SEND_FINAL_ACK:
            pass  # completes when the client's ACK is captured in on_lan_packet
        elif kind is _A.SEND_FIN_ACK_TO_CLIENT:
            if session.client_port and session.target_ip:
                self.lan_send(tcp_packet(session.target_ip, session.target_port, session.client_ip,
                                         session.client_port, flags=TcpFlags.FIN | TcpFlags.ACK,
                                         seq=session.server_next_seq, ack_no=session.client_next_seq))
        elif kind is _A.LOG_ERROR:
            msg = f"session {session.session_id}: no SYN-ACK within {self.syn_ack_timeout}s"
            self.errors.append(msg)
            log.warning("EH %s", msg)
        elif kind is _A.CHUNK_AND_SEND:
            self._chunk_and_send(session, action.data)
        elif kind is _A.REASSEMBLE_AND_FORWARD:
            for seg in relay_downlink(action.data, session, self.mss):
                self.lan_send(seg)
        elif kind is _A.CLEANUP:
            self._teardown(session, notify_peer=True)

    def _chunk_and_send(self, session: SessionRecord, pkt: PacketView) -> None:
        if pkt.seq != session.client_next_seq:
            return  # retransmission or gap; LAN is lossless so just drop it
        session.client_next_seq = (pkt.seq + len(pkt.payload)) & 0xFFFFFFFF
        self.lan_send(tcp_packet(session.target_ip, session.target_port, session.client_ip, session.client_port,
                                 flags=TcpFlags.ACK, seq=session.server_next_seq, ack_no=session.client_next_seq))
        session.stage_timestamps.setdefault("first_tls_up", self.sim.now)
        try:
            messages = relay_uplink(pkt.payload, session)
        except StreamCorrupt as exc:
            self.errors.append(f"session {session.session_id}: {exc}")
            self._step(session, EhEvent(_E.E8_SESSION_END, "corrupt"))
            return
        for m in messages:
            self.link.send(m)

    def _teardown(self, session: SessionRecord, notify_peer: bool) -> None:
        if self.sessions.get(session.session_id) is not session:
            return
        if session.timer is not None:
            session.timer.cancel()
            session.timer = None
        del self.sessions[session.session_id]
        if session.admitted:
            session.admitted = False
            self.sentinel.release()
        ended_by_peer = session.stage_timestamps.get("peer_end") is not None
        if notify_peer and not ended_by_peer and session.client_port:
            self._send_lora(session, MessageKind.FIN, b"close")
