"""Half-duplex LoRa link model: airtime, loss and jamming, airtime ledger."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import IO, Iterable

EH = "EH"
NR = "NR"

_BANDWIDTHS = (125_000, 250_000, 500_000)


class InvalidLength(ValueError):
    pass


class EmptyWindow(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    spreading_factor: int = 7
    bandwidth_hz: int = 500_000
    coding_rate: int = 1
    preamble_symbols: int = 8
    explicit_header: bool = True
    low_data_rate_optimize: bool = False
    loss_probability: float = 0.0
    jam_windows: tuple[tuple[float, float], ...] = ()
    propagation_delay: float = 0.0
    rng_seed: int = 0
    # not part of the physical model; lets tests drive the CRC path
    corrupt_probability: float = 0.0

    def __post_init__(self):
        if not 6 <= self.spreading_factor <= 12:
            raise ValueError(f"spreading_factor {self.spreading_factor} outside 6..12")
        if self.bandwidth_hz not in _BANDWIDTHS:
            raise ValueError(f"bandwidth_hz must be one of {_BANDWIDTHS}")
        if not 1 <= self.coding_rate <= 4:
            raise ValueError("coding_rate must be 1..4 (4/5..4/8)")
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must be in [0, 1)")
        if not 0.0 <= self.corrupt_probability < 1.0:
            raise ValueError("corrupt_probability must be in [0, 1)")
        if self.propagation_delay < 0:
            raise ValueError("propagation_delay must be >= 0")
        windows = sorted((float(a), float(b)) for a, b in self.jam_windows)
        for a, b in windows:
            if b <= a:
                raise ValueError(f"empty jam window ({a}, {b})")
        for (_, b1), (a2, _) in zip(windows, windows[1:]):
            if a2 < b1:
                raise ValueError("jam windows overlap")
        object.__setattr__(self, "jam_windows", tuple(windows))

    @property
    def symbol_time(self) -> float:
        return (1 << self.spreading_factor) / self.bandwidth_hz


def payload_symbols(frame_length: int, config: ChannelConfig) -> int:
    sf = config.spreading_factor
    ih = 0 if config.explicit_header else 1
    de = 1 if config.low_data_rate_optimize else 0
    num = 8 * frame_length - 4 * sf + 28 + 16 - 20 * ih
    return 8 + max(0, math.ceil(num / (4 * (sf - 2 * de)))) * (config.coding_rate + 4)


def airtime(frame_length: int, config: ChannelConfig) -> float:
    """Time on air in seconds for a frame of ``frame_length`` PHY payload bytes (CRC on)."""
    if not 1 <= frame_length <= 255:
        raise InvalidLength(f"frame length {frame_length} outside 1..255")
    n_symbols = config.preamble_symbols + 4.25 + payload_symbols(frame_length, config)
    return n_symbols * config.symbol_time


@dataclass(frozen=True)
class LedgerEntry:
    t: float
    sender: str
    frame: bytes
    airtime_s: float
    outcome: str

    def to_json(self) -> dict:
        return {"t": self.t, "sender": self.sender, "bytes": self.frame.hex(),
                "airtime_s": self.airtime_s, "outcome": self.outcome}

    @classmethod
    def from_json(cls, obj: dict) -> "LedgerEntry":
        return cls(obj["t"], obj["sender"], bytes.fromhex(obj["bytes"]), obj["airtime_s"],
                   obj.get("outcome", "scheduled"))


@dataclass
class AirtimeLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, entry: LedgerEntry) -> None:
        if self.entries:
            last = self.entries[-1]
            if entry.t < last.t:
                raise ValueError("ledger entries must be chronological")
            if entry.t < last.t + last.airtime_s - 1e-12:
                raise ValueError("overlapping transmissions on a half-duplex channel")
        self.entries.append(entry)

    def total_airtime(self, sender: str | None = None) -> float:
        return math.fsum(e.airtime_s for e in self.entries if sender is None or e.sender == sender)

    def write_jsonl(self, fh: IO[str]) -> None:
        for e in self.entries:
            fh.write(json.dumps(e.to_json()) + "\n")

    @classmethod
    def read_jsonl(cls, lines: Iterable[str]) -> "AirtimeLedger":
        return cls([LedgerEntry.from_json(json.loads(line)) for line in lines if line.strip()])


@dataclass(frozen=True)
class Scheduled:
    delivery_time: float
    airtime: float
    frame: bytes


@dataclass(frozen=True)
class ChannelBusy:
    free_at: float


@dataclass(frozen=True)
class Lost:
    airtime: float


@dataclass(frozen=True)
class Jammed:
    airtime: float


TransmitOutcome = Scheduled | ChannelBusy | Lost | Jammed


class LoRaChannel:
    """The single shared EH<->NR link.

    Callers serialize ``transmit`` in non-decreasing ``now``; the channel keeps
    no reference to receivers, it only says when (and whether) a frame lands.
    """

    def __init__(self, config: ChannelConfig):
        self.config = config
        self.rng = random.Random(config.rng_seed)
        self.ledger = AirtimeLedger()
        self.busy_until = float("-inf")

    def airtime(self, frame_length: int) -> float:
        return airtime(frame_length, self.config)

    def is_busy(self, now: float) -> bool:
        return now < self.busy_until

    def _jammed(self, start: float, end: float) -> bool:
        return any(a < end and start < b for a, b in self.config.jam_windows)

    def transmit(self, frame: bytes, sender: str, now: float) -> TransmitOutcome:
        if now < self.busy_until:
            return ChannelBusy(self.busy_until)
        t_air = self.airtime(len(frame))
        end = now + t_air
        self.busy_until = end
        draw = self.rng.random()
        if self._jammed(now, end):
            self.ledger.record(LedgerEntry(now, sender, frame, t_air, "jammed"))
            return Jammed(t_air)
        if draw < self.config.loss_probability:
            self.ledger.record(LedgerEntry(now, sender, frame, t_air, "lost"))
            return Lost(t_air)
        delivered = frame
        if self.config.corrupt_probability and self.rng.random() < self.config.corrupt_probability:
            bit = self.rng.randrange(len(frame) * 8)
            buf = bytearray(frame)
            buf[bit // 8] ^= 1 << (bit % 8)
            delivered = bytes(buf)
        self.ledger.record(LedgerEntry(now, sender, frame, t_air, "scheduled"))
        return Scheduled(end + self.config.propagation_delay, t_air, delivered)


def duty_cycle(ledger: AirtimeLedger, window: float, sender: str | None = None,
               start: float = 0.0) -> float:
    """Percentage of ``[start, start + window)`` a sender spent transmitting.

    Entries straddling the window edge contribute only their overlap.
    """
    if not window > 0:
        raise EmptyWindow("window must be positive")
    end = start + window
    on = math.fsum(
        max(0.0, min(e.t + e.airtime_s, end) - max(e.t, start))
        for e in ledger.entries
        if sender is None or e.sender == sender
    )
    return 100.0 * on / window
