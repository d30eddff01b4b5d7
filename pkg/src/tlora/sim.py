"""Minimal discrete-event core: a virtual clock and a time-ordered callback queue."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable


@dataclass(order=True)
class Timer:
    when: float
    seq: int
    fn: Callable[..., Any] = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Events at equal times run in scheduling order, so runs are reproducible."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._queue: list[Timer] = []
        self._seq = itertools.count()
        self.events_run = 0

    def schedule(self, delay: float, fn: Callable[..., Any], *args) -> Timer:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.at(self.now + delay, fn, *args)

    def at(self, when: float, fn: Callable[..., Any], *args) -> Timer:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        timer = Timer(when, next(self._seq), fn, args)
        heapq.heappush(self._queue, timer)
        return timer

    def step(self) -> bool:
        while self._queue:
            timer = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = timer.when
            self.events_run += 1
            timer.fn(*timer.args)
            return True
        return False

    def run(self, until: float | None = None, stop: Callable[[], bool] | None = None,
            max_events: int = 10_000_000) -> None:
        for _ in range(max_events):
            if stop is not None and stop():
                return
            if not self._queue:
                return
            if until is not None and self._queue[0].when > until:
                self.now = until
                return
            self.step()
        raise RuntimeError(f"simulation did not settle within {max_events} events")

    @property
    def pending(self) -> int:
        return sum(1 for t in self._queue if not t.cancelled)


class ManualClock:
    """Monotonic virtual clock for blocking (non-event) callers."""

    def __init__(self, start: float = 0.0):
        self.now = start

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("clock is monotonic")
        self.now += dt
        return self.now

    def advance_to(self, t: float) -> float:
        if t > self.now:
            self.now = t
        return self.now
