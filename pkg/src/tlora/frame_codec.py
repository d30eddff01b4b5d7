"""Chunking, LoRa wire framing and stop-and-wait delivery.

Wire layout of one frame (all multi-byte fields big-endian)::

    magic(1)=0xA7 | kind(1) | session(1) | payload_id(2) | total_chunks(1)
    | chunk_index(1) | length(1) | payload(length) | crc16(2)

The magic byte doubles as the format version: 0xA7 is version 1, and a
future layout would get a new magic. The CRC is CRC-16/CCITT-FALSE over
every byte before it.
"""

from __future__ import annotations

import binascii
import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Generator, Protocol

MAGIC = 0xA7
VERSION = 1  # implied by MAGIC
KIND_OFFSET = 1
L_MAX = 200
HEADER_LEN = 8
OVERHEAD = HEADER_LEN + 2  # header + crc
MAX_FRAME = OVERHEAD + 255
MAX_CHUNKS = 255
PAYLOAD_ID_MOD = 1 << 16

_HEADER = struct.Struct("!BBBHBBB")
assert _HEADER.size == HEADER_LEN


class MessageKind(enum.IntEnum):
    DNS_QUERY = 1
    DNS_RESP = 2
    TCP_SYN = 3
    TCP_SYNACK = 4
    TCP_ACK = 5
    TLS_DATA = 6
    FIN = 7
    ERROR = 8


CHUNK_ACK = 0x80
FRAME_KINDS = frozenset(int(k) for k in MessageKind) | {CHUNK_ACK}


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class BadKind(FrameError):
    pass


class OversizePayload(FrameError):
    pass


class FragmentError(ValueError):
    pass


class EmptyPayload(FragmentError):
    pass


class TooManyChunks(FragmentError):
    pass


@dataclass(frozen=True)
class PayloadMessage:
    payload_id: int
    kind: MessageKind
    session_id: int
    data: bytes

    def __post_init__(self):
        if not 0 <= self.payload_id < PAYLOAD_ID_MOD:
            raise ValueError(f"payload_id out of range: {self.payload_id}")
        if not 0 <= self.session_id <= 0xFF:
            raise ValueError(f"session_id out of range: {self.session_id}")


@dataclass(frozen=True, slots=True)
class Chunk:
    payload_id: int
    total_chunks: int
    chunk_index: int
    data: bytes


@dataclass(frozen=True)
class LoRaFrame:
    kind: int
    session_id: int
    payload_id: int
    total_chunks: int
    chunk_index: int
    payload: bytes = b""

    @property
    def is_ack(self) -> bool:
        return self.kind == CHUNK_ACK

    def chunk(self) -> Chunk:
        return Chunk(self.payload_id, self.total_chunks, self.chunk_index, self.payload)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 5
    ack_timeout: float = 300.0  # milliseconds

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not self.ack_timeout > 0:
            raise ValueError("ack_timeout must be > 0")

    @property
    def ack_timeout_s(self) -> float:
        return self.ack_timeout / 1000.0

    @classmethod
    def for_airtimes(cls, data_airtime: float, ack_airtime: float, max_retries: int = 5,
                     margin_ms: float = 50.0) -> "RetryPolicy":
        """Timeout of two full data+ACK exchanges plus a margin (airtimes in seconds)."""
        return cls(max_retries, 2000.0 * (data_airtime + ack_airtime) + margin_ms)


def crc16_ccitt_false(data: bytes) -> int:
    return binascii.crc_hqx(data, 0xFFFF)


# --------------------------------------------------------------------------
# fragmentation


def chunk_count(size: int, l_max: int = L_MAX) -> int:
    return math.ceil(size / l_max)


def fragment(message: PayloadMessage | bytes, l_max: int = L_MAX, payload_id: int = 0) -> list[Chunk]:
    """Split a payload into ``ceil(len/l_max)`` chunks with 1-based indices."""
    if isinstance(message, PayloadMessage):
        data, payload_id = message.data, message.payload_id
    else:
        data = bytes(message)
    if l_max <= 0:
        raise ValueError("l_max must be positive")
    if not data:
        raise EmptyPayload("cannot fragment an empty payload")
    k = chunk_count(len(data), l_max)
    if k > MAX_CHUNKS:
        raise TooManyChunks(f"{len(data)} bytes need {k} chunks (max {MAX_CHUNKS})")
    return [
        Chunk(payload_id, k, j + 1, data[j * l_max:(j + 1) * l_max])
        for j in range(k)
    ]


@dataclass(frozen=True)
class Complete:
    data: bytes


@dataclass(frozen=True)
class Incomplete:
    missing: frozenset[int]


@dataclass(frozen=True)
class Inconsistent:
    reason: str


ReassemblyResult = Complete | Incomplete | Inconsistent


def reassemble(chunks) -> ReassemblyResult:
    """Rebuild a payload from chunks of one payload_id in any order.

    Identical duplicates are ignored; conflicting duplicates or disagreeing
    metadata give ``Inconsistent``.
    """
    by_index: dict[int, bytes] = {}
    total = None
    payload_id = None
    for c in chunks:
        if total is None:
            total, payload_id = c.total_chunks, c.payload_id
        elif c.total_chunks != total:
            return Inconsistent(f"total_chunks disagrees: {c.total_chunks} != {total}")
        elif c.payload_id != payload_id:
            return Inconsistent(f"payload_id disagrees: {c.payload_id} != {payload_id}")
        if not 1 <= c.chunk_index <= c.total_chunks:
            return Inconsistent(f"chunk_index {c.chunk_index} outside 1..{c.total_chunks}")
        prev = by_index.get(c.chunk_index)
        if prev is None:
            by_index[c.chunk_index] = c.data
        elif prev != c.data:
            return Inconsistent(f"conflicting data for chunk {c.chunk_index}")
    if total is None:
        return Incomplete(frozenset())
    if len(by_index) < total:
        return Incomplete(frozenset(set(range(1, total + 1)) - by_index.keys()))
    return Complete(b"".join(by_index[j] for j in range(1, total + 1)))


# --------------------------------------------------------------------------
# wire codec


def encode_frame(unit: Chunk | LoRaFrame, kind: int | None = None, session_id: int | None = None) -> bytes:
    if isinstance(unit, LoRaFrame):
        kind = unit.kind if kind is None else kind
        session_id = unit.session_id if session_id is None else session_id
        payload_id, total, index, payload = unit.payload_id, unit.total_chunks, unit.chunk_index, unit.payload
    else:
        if kind is None or session_id is None:
            raise TypeError("kind and session_id are required when encoding a Chunk")
        payload_id, total, index, payload = unit.payload_id, unit.total_chunks, unit.chunk_index, unit.data
    kind = int(kind)
    if kind not in FRAME_KINDS:
        raise BadKind(f"unknown frame kind {kind:#x}")
    if len(payload) > L_MAX:
        raise OversizePayload(f"payload of {len(payload)} bytes exceeds {L_MAX}")
    head = _HEADER.pack(MAGIC, kind, session_id, payload_id, total, index, len(payload))
    body = head + payload
    return body + crc16_ccitt_false(body).to_bytes(2, "big")


def ack_frame(session_id: int, payload_id: int, total_chunks: int, chunk_index: int) -> bytes:
    return encode_frame(LoRaFrame(CHUNK_ACK, session_id, payload_id, total_chunks, chunk_index))


def decode_frame(buf: bytes) -> LoRaFrame:
    buf = bytes(buf)
    if len(buf) < OVERHEAD:
        raise LengthMismatch(f"frame of {len(buf)} bytes is shorter than {OVERHEAD}")
    magic, kind, session_id, payload_id, total, index, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic:#04x}")
    if len(buf) != OVERHEAD + length:
        raise LengthMismatch(f"length field {length} vs frame size {len(buf)}")
    if crc16_ccitt_false(buf[:-2]) != int.from_bytes(buf[-2:], "big"):
        raise CrcMismatch("crc16 does not verify")
    if kind not in FRAME_KINDS:
        raise BadKind(f"unknown frame kind {kind:#x}")
    return LoRaFrame(kind, session_id, payload_id, total, index, buf[HEADER_LEN:HEADER_LEN + length])


# --------------------------------------------------------------------------
# receiver side


@dataclass(frozen=True)
class EmitAck:
    session_id: int
    payload_id: int
    total_chunks: int
    chunk_index: int

    def frame(self) -> bytes:
        return ack_frame(self.session_id, self.payload_id, self.total_chunks, self.chunk_index)


@dataclass(frozen=True)
class MessageReady:
    message: PayloadMessage


@dataclass
class _Partial:
    kind: int
    chunks: dict[int, Chunk]
    total: int
    started: float


@dataclass
class ReassemblyStore:
    """Per-receiver buffers keyed by (session_id, payload_id).

    ``linger`` is how long a completed id is remembered so late duplicates are
    re-ACKed without producing a second ``MessageReady``; ``stale_after``
    bounds the lifetime of an incomplete buffer.
    """

    linger: float = 2.0
    stale_after: float = 30.0
    partial: dict[tuple[int, int], _Partial] = field(default_factory=dict)
    completed: dict[tuple[int, int], float] = field(default_factory=dict)
    rejected: int = 0

    def evict(self, now: float) -> None:
        for key in [k for k, t in self.completed.items() if now - t > self.linger]:
            del self.completed[key]
        for key in [k for k, p in self.partial.items() if now - p.started > self.stale_after]:
            del self.partial[key]

    def holding(self, session_id: int, payload_id: int) -> int:
        p = self.partial.get((session_id, payload_id))
        return len(p.chunks) if p else 0


def on_frame(frame: LoRaFrame, store: ReassemblyStore, now: float = 0.0) -> list[EmitAck | MessageReady]:
    """Receiver reaction to one decoded data frame.

    Every valid data frame is ACKed, duplicates included, so a lost ACK heals
    on the sender's next retry.
    """
    if frame.is_ack:
        return []
    store.evict(now)
    key = (frame.session_id, frame.payload_id)
    if not 1 <= frame.chunk_index <= frame.total_chunks:
        store.rejected += 1
        return []
    ack = EmitAck(frame.session_id, frame.payload_id, frame.total_chunks, frame.chunk_index)
    if key in store.completed:
        return [ack]
    part = store.partial.get(key)
    if part is None or part.total != frame.total_chunks or part.kind != frame.kind:
        # a reused payload_id with different metadata restarts the buffer
        part = _Partial(frame.kind, {}, frame.total_chunks, now)
        store.partial[key] = part
    part.chunks.setdefault(frame.chunk_index, frame.chunk())
    if len(part.chunks) < part.total:
        return [ack]
    result = reassemble(part.chunks.values())
    del store.partial[key]
    if not isinstance(result, Complete):
        store.rejected += 1
        return [ack]
    store.completed[key] = now
    msg = PayloadMessage(frame.payload_id, MessageKind(frame.kind), frame.session_id, result.data)
    return [ack, MessageReady(msg)]


class OrderedInbox:
    """Releases one session's messages in payload_id order (mod 2**16)."""

    def __init__(self, first_id: int = 0):
        self.next_id = first_id
        self._held: dict[int, PayloadMessage] = {}

    def push(self, message: PayloadMessage) -> list[PayloadMessage]:
        ahead = (message.payload_id - self.next_id) % PAYLOAD_ID_MOD
        if ahead >= PAYLOAD_ID_MOD // 2:
            return []  # already delivered
        self._held.setdefault(message.payload_id, message)
        ready = []
        while self.next_id in self._held:
            ready.append(self._held.pop(self.next_id))
            self.next_id = (self.next_id + 1) % PAYLOAD_ID_MOD
        return ready

    @property
    def pending(self) -> int:
        return len(self._held)


# --------------------------------------------------------------------------
# sender side (stop-and-wait per chunk)


@dataclass(frozen=True)
class TxRequest:
    frame: bytes
    chunk_index: int
    attempt: int


@dataclass(frozen=True)
class Delivered:
    attempts: tuple[int, ...]


@dataclass(frozen=True)
class Failed:
    chunk_index: int
    attempts: tuple[int, ...]


DeliveryResult = Delivered | Failed


def arq_process(message: PayloadMessage, policy: RetryPolicy, l_max: int = L_MAX) -> Generator[TxRequest, bool, DeliveryResult]:
    """Stop-and-wait transmission schedule for one message.

    Yields a ``TxRequest`` per transmission and expects ``True`` to be sent
    back when the matching CHUNK_ACK arrived within the ack timeout.
    """
    attempts: list[int] = []
    for chunk in fragment(message, l_max):
        frame = encode_frame(chunk, message.kind, message.session_id)
        for attempt in range(1, policy.max_retries + 2):
            if (yield TxRequest(frame, chunk.chunk_index, attempt)):
                attempts.append(attempt)
                break
        else:
            return Failed(chunk.chunk_index, tuple(attempts) + (policy.max_retries + 1,))
    return Delivered(tuple(attempts))


class FramePort(Protocol):
    def exchange(self, frame: bytes, timeout: float) -> bytes | None:
        """Transmit ``frame`` and return the first reply frame seen within ``timeout`` seconds."""


def ack_matches(reply: bytes | None, message: PayloadMessage, chunk_index: int) -> bool:
    if reply is None:
        return False
    try:
        f = decode_frame(reply)
    except FrameError:
        return False
    return (
        f.is_ack
        and f.session_id == message.session_id
        and f.payload_id == message.payload_id
        and f.chunk_index == chunk_index
    )


def reliable_send(message: PayloadMessage, port: FramePort, policy: RetryPolicy | None = None,
                  clock=None, l_max: int = L_MAX) -> DeliveryResult:
    """Blocking stop-and-wait send over ``port``.

    ``clock`` is accepted for ports that share a virtual clock with the caller;
    the port itself is responsible for advancing it.
    """
    policy = policy or RetryPolicy()
    proc = arq_process(message, policy, l_max)
    try:
        req = next(proc)
        while True:
            reply = port.exchange(req.frame, policy.ack_timeout_s)
            req = proc.send(ack_matches(reply, message, req.chunk_index))
    except StopIteration as stop:
        return stop.value
