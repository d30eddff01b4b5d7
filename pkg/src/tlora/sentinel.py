"""Admission control for new tunnel sessions: a concurrency cap in front of a token bucket."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace


class ClockWentBackwards(ValueError):
    pass


class Underflow(ValueError):
    pass


class Decision(enum.Enum):
    ADMITTED = "admitted"
    REJECTED_CONCURRENCY = "rejected_concurrency"
    REJECTED_RATE = "rejected_rate"


@dataclass(frozen=True)
class SentinelConfig:
    n_max: int = 1
    t_max: float = 1.0
    rho: float = 1.0 / 15.0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")


@dataclass(frozen=True)
class Tallies:
    admitted: int = 0
    rejected_concurrency: int = 0
    rejected_rate: int = 0

    def bump(self, decision: Decision) -> "Tallies":
        key = decision.value
        return replace(self, **{key: getattr(self, key) + 1})

    def as_dict(self) -> dict[str, int]:
        return {"admitted": self.admitted, "rejected_concurrency": self.rejected_concurrency,
                "rejected_rate": self.rejected_rate}


@dataclass(frozen=True)
class SentinelState:
    config: SentinelConfig
    n_active: int = 0
    tokens: float = 0.0
    last_refill: float = 0.0
    tallies: Tallies = field(default_factory=Tallies)

    @classmethod
    def initial(cls, config: SentinelConfig, now: float = 0.0) -> "SentinelState":
        # full bucket so the first client is never rate limited
        return cls(config, 0, float(config.t_max), now)


def refill(state: SentinelState, now: float) -> SentinelState:
    dt = now - state.last_refill
    if dt < 0:
        raise ClockWentBackwards(f"now={now} is before last_refill={state.last_refill}")
    if dt == 0:
        return state
    tokens = min(state.config.t_max, state.tokens + state.config.rho * dt)
    return replace(state, tokens=tokens, last_refill=now)


def admit(state: SentinelState, now: float) -> tuple[Decision, SentinelState]:
    """Refill, then admit iff a session slot is free and a whole token is available.

    The concurrency check is made first, so a client arriving while the slot
    is taken counts as a concurrency rejection even if the bucket is empty.
    """
    state = refill(state, now)
    if state.n_active >= state.config.n_max:
        decision = Decision.REJECTED_CONCURRENCY
    elif state.tokens < 1.0:
        decision = Decision.REJECTED_RATE
    else:
        decision = Decision.ADMITTED
        state = replace(state, tokens=state.tokens - 1.0, n_active=state.n_active + 1)
    return decision, replace(state, tallies=state.tallies.bump(decision))


def release(state: SentinelState) -> SentinelState:
    if state.n_active < 1:
        raise Underflow("release with no active session")
    return replace(state, n_active=state.n_active - 1)


class Sentinel:
    """Mutable holder used by the End Hub; the functions above do the work."""

    def __init__(self, config: SentinelConfig | None = None, now: float = 0.0):
        self.state = SentinelState.initial(config or SentinelConfig(), now)

    def admit(self, now: float) -> Decision:
        decision, self.state = admit(self.state, now)
        return decision

    def release(self) -> None:
        self.state = release(self.state)

    @property
    def tallies(self) -> Tallies:
        return self.state.tallies
