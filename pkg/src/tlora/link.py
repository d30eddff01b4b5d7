"""Event-driven LoRa link endpoint shared by the End Hub and the Net Relay.

Outgoing messages are served FIFO across sessions; each one runs the
stop-and-wait schedule from :func:`tlora.frame_codec.arq_process`.
Every frame the radio hands up (data or ACK) costs the host
``processing_delay`` seconds before it is acted on.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .frame_codec import (
    L_MAX,
    Delivered,
    DeliveryResult,
    EmitAck,
    FrameError,
    LoRaFrame,
    MessageReady,
    OVERHEAD,
    PayloadMessage,
    ReassemblyStore,
    RetryPolicy,
    TxRequest,
    arq_process,
    decode_frame,
    on_frame,
)
from .lora_channel import ChannelBusy, ChannelConfig, LoRaChannel, Scheduled, airtime
from .sim import Simulator, Timer

log = logging.getLogger(__name__)

CARRIER_SENSE_GUARD = 0.001  # seconds waited after the channel frees before retrying


@dataclass
class LinkStats:
    chunks_sent: int = 0          # distinct chunks handed to the radio
    chunks_received: int = 0      # distinct chunks accepted from the peer
    data_transmissions: int = 0   # data frames that actually went on air
    ack_transmissions: int = 0
    retransmissions: int = 0
    busy_deferrals: int = 0
    crc_drops: int = 0
    messages_delivered: int = 0
    messages_failed: int = 0


def default_retry_policy(channel: ChannelConfig, l_max: int = L_MAX, max_retries: int = 5) -> RetryPolicy:
    return RetryPolicy.for_airtimes(airtime(l_max + OVERHEAD, channel), airtime(OVERHEAD, channel), max_retries)


class LinkEndpoint:
    def __init__(self, sim: Simulator, channel: LoRaChannel, node_id: str, policy: RetryPolicy,
                 l_max: int = L_MAX, processing_delay: float = 0.0):
        self.sim = sim
        self.channel = channel
        self.node_id = node_id
        self.policy = policy
        self.l_max = l_max
        self.processing_delay = processing_delay
        self.peer: LinkEndpoint | None = None
        self.on_message: Callable[[PayloadMessage], None] = lambda m: None
        self.on_result: Callable[[PayloadMessage, DeliveryResult], None] = lambda m, r: None
        self.on_transmit: Callable[[str, bytes, float, object], None] = lambda *a: None
        linger = (policy.max_retries + 2) * (policy.ack_timeout_s + channel.airtime(l_max + OVERHEAD))
        self.store = ReassemblyStore(linger=linger)
        self.stats = LinkStats()
        self._queue: deque[PayloadMessage] = deque()
        self._current: PayloadMessage | None = None
        self._proc = None
        self._req: TxRequest | None = None
        self._ack_timer: Timer | None = None
        self._pending_acks: deque[bytes] = deque()
        self._retry_timer: Timer | None = None
        self._ack_in_host = False   # ACK received by the radio, host still processing it
        self._seen_chunks: set[tuple[int, int, int]] = set()

    def connect(self, peer: "LinkEndpoint") -> None:
        self.peer, peer.peer = peer, self

    # -- sending --------------------------------------------------------
    def send(self, message: PayloadMessage) -> None:
        self._queue.append(message)
        if self._current is None:
            self._next_message()

    @property
    def idle(self) -> bool:
        return self._current is None and not self._queue and not self._pending_acks

    @property
    def backlog(self) -> int:
        return len(self._queue) + (self._current is not None)

    def _next_message(self) -> None:
        if not self._queue:
            self._current = None
            return
        self._current = self._queue.popleft()
        self._proc = arq_process(self._current, self.policy, self.l_max)
        self._advance(None)

    def _advance(self, acked: bool | None) -> None:
        try:
            self._req = next(self._proc) if acked is None else self._proc.send(acked)
        except StopIteration as stop:
            self._finish(stop.value)
            return
        if self._req.attempt == 1:
            self.stats.chunks_sent += 1
        else:
            self.stats.retransmissions += 1
        self._kick()

    def _finish(self, result: DeliveryResult) -> None:
        msg = self._current
        self._req = None
        if isinstance(result, Delivered):
            self.stats.messages_delivered += 1
        else:
            self.stats.messages_failed += 1
            log.warning("%s: message %s/%d failed at chunk %d", self.node_id, msg.kind.name,
                        msg.payload_id, result.chunk_index)
        self.on_result(msg, result)
        self._next_message()

    def _kick(self) -> None:
        """Put the next pending frame on air; ACKs go before data."""
        if self._retry_timer is not None:
            return
        now = self.sim.now
        if self.channel.is_busy(now):
            self.stats.busy_deferrals += 1
            self._retry_timer = self.sim.at(self.channel.busy_until + CARRIER_SENSE_GUARD, self._retry)
            return
        if self._pending_acks:
            self._air(self._pending_acks.popleft(), is_data=False)
            if self._pending_acks or self._waiting_to_send_data():
                self._kick()
            return
        if self._waiting_to_send_data():
            self._air(self._req.frame, is_data=True)

    def _retry(self) -> None:
        self._retry_timer = None
        self._kick()

    def _waiting_to_send_data(self) -> bool:
        return self._req is not None and self._ack_timer is None and not self._ack_in_host

    def _air(self, frame: bytes, is_data: bool) -> None:
        outcome = self.channel.transmit(frame, self.node_id, self.sim.now)
        if isinstance(outcome, ChannelBusy):
            raise RuntimeError("transmit on a busy channel; _kick must sense the carrier first")
        self.on_transmit(self.node_id, frame, self.sim.now, outcome)
        if is_data:
            self.stats.data_transmissions += 1
            end = self.sim.now + outcome.airtime
            self._ack_timer = self.sim.at(end + self.policy.ack_timeout_s, self._ack_timeout)
        else:
            self.stats.ack_transmissions += 1
        if isinstance(outcome, Scheduled) and self.peer is not None:
            self.sim.at(outcome.delivery_time, self.peer._receive, outcome.frame)

    def _ack_timeout(self) -> None:
        self._ack_timer = None
        self._advance(False)

    # -- receiving ------------------------------------------------------
    def _receive(self, raw: bytes) -> None:
        try:
            frame = decode_frame(raw)
        except FrameError:
            self.stats.crc_drops += 1
            return
        if frame.is_ack:
            self._on_ack(frame)
        elif self.processing_delay > 0:
            self.sim.schedule(self.processing_delay, self._on_data, frame)
        else:
            self._on_data(frame)

    def _on_ack(self, frame: LoRaFrame) -> None:
        req, msg = self._req, self._current
        if req is None or self._ack_timer is None:
            return
        if (frame.session_id, frame.payload_id, frame.chunk_index) != (msg.session_id, msg.payload_id, req.chunk_index):
            return
        # the radio has the ACK, so the timeout stops here; the host then
        # spends processing_delay on it before moving to the next chunk
        self._ack_timer.cancel()
        self._ack_timer = None
        if self.processing_delay > 0:
            self._ack_in_host = True
            self.sim.schedule(self.processing_delay, self._ack_processed)
        else:
            self._advance(True)

    def _ack_processed(self) -> None:
        self._ack_in_host = False
        self._advance(True)

    def _on_data(self, frame: LoRaFrame) -> None:
        key = (frame.session_id, frame.payload_id, frame.chunk_index)
        for action in on_frame(frame, self.store, self.sim.now):
            if isinstance(action, EmitAck):
                if key not in self._seen_chunks:
                    self._seen_chunks.add(key)
                    self.stats.chunks_received += 1
                self._pending_acks.append(action.frame())
                self._kick()
            elif isinstance(action, MessageReady):
                self.on_message(action.message)
