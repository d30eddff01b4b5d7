"""Pieces shared by the End Hub and Net Relay state machines."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable

from .frame_codec import MessageKind


@dataclass(frozen=True)
class Action:
    kind: enum.Enum
    message_kind: MessageKind | None = None
    data: Any = None

    def describe(self) -> str:
        if self.message_kind is not None:
            return f"{self.kind.name}({self.message_kind.name})"
        return self.kind.name


@dataclass(frozen=True)
class Transition:
    t: float
    node: str
    session: int
    state: str
    event: str
    next_state: str
    actions: tuple[str, ...]

    def to_json(self) -> dict:
        return {"kind": "transition", "t": self.t, "node": self.node, "session": self.session,
                "state": self.state, "event": self.event, "next_state": self.next_state,
                "actions": list(self.actions)}


TraceSink = Callable[[dict], None]


def null_sink(record: dict) -> None:
    pass
