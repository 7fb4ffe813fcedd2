"""Discrete-event kernel: virtual clock, ordered event queue, named RNG streams.

All time is integer microseconds since scenario start. Nothing in here reads
the wall clock.
"""
from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable


class SchedulingError(ValueError):
    """An event was scheduled in the past (a caller logic bug)."""


@dataclass(order=True)
class SimEvent:
    fire_at: int
    sequence: int
    target: str = field(compare=False)
    callback: Callable[..., Any] | None = field(default=None, compare=False, repr=False)
    payload: Any = field(default=None, compare=False, repr=False)
    cancelled: bool = field(default=False, compare=False)


class SeededRng(random.Random):
    """A ``random.Random`` whose state is a pure function of (seed, label).

    The derivation goes through SHA-256 so streams are identical on every
    platform and independent of Python's string hash randomisation.
    """

    def __new__(cls, seed: int, stream_label: str):
        # random.Random.__new__ only accepts a single seed argument on 3.10
        return super().__new__(cls)

    def __init__(self, seed: int, stream_label: str):
        if not stream_label:
            raise ValueError("stream label must be non-empty")
        self.master_seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream_label = stream_label
        digest = hashlib.sha256(f"{self.master_seed}/{stream_label}".encode()).digest()
        super().__init__(int.from_bytes(digest, "big"))


class VirtualClock:
    def __init__(self) -> None:
        self._now = 0

    @property
    def now(self) -> int:
        return self._now

    def _advance(self, t: int) -> None:
        if t < self._now:
            raise SchedulingError(f"clock cannot go backwards ({t} < {self._now})")
        self._now = t


class Kernel:
    """Single-threaded event loop.

    Events fire in (fire_at, sequence) order; ``sequence`` is assigned at
    schedule time so same-instant events run in the order they were queued.
    """

    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.clock = VirtualClock()
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self._labels: set[str] = set()
        self._last_key: tuple[int, int] = (-1, -1)
        self.dispatched = 0
        self.trace: list[tuple[int, int, str]] | None = [] if trace else None

    @property
    def now(self) -> int:
        return self.clock.now

    def schedule(self, fire_at: int, target: str, callback: Callable[..., Any] | None = None,
                 payload: Any = None) -> SimEvent:
        fire_at = int(fire_at)
        if fire_at < self.clock.now:
            raise SchedulingError(
                f"event for {target!r} at t={fire_at} is before now={self.clock.now}")
        ev = SimEvent(fire_at, self._seq, target, callback, payload)
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, ev.sequence, ev))
        return ev

    def schedule_in(self, delay: int, target: str, callback: Callable[..., Any] | None = None,
                    payload: Any = None) -> SimEvent:
        return self.schedule(self.clock.now + int(delay), target, callback, payload)

    @staticmethod
    def cancel(event: SimEvent) -> None:
        event.cancelled = True

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def run_until(self, t_end: int) -> int:
        t_end = int(t_end)
        if t_end < self.clock.now:
            raise SchedulingError(f"run_until({t_end}) is before now={self.clock.now}")
        count = 0
        queue = self._queue
        while queue and queue[0][0] <= t_end:
            ev = heapq.heappop(queue)[2]
            if ev.cancelled:
                continue
            key = (ev.fire_at, ev.sequence)
            assert key > self._last_key, "event dispatched out of order"
            self._last_key = key
            self.clock._advance(ev.fire_at)
            if self.trace is not None:
                self.trace.append((ev.fire_at, ev.sequence, ev.target))
            if ev.callback is not None:
                if ev.payload is None:
                    ev.callback()
                else:
                    ev.callback(ev.payload)
            count += 1
        self.clock._advance(t_end)
        self.dispatched += count
        return count

    def fork_rng(self, stream_label: str) -> SeededRng:
        if not stream_label:
            raise ValueError("stream label must be non-empty")
        if stream_label in self._labels:
            raise ValueError(f"rng stream {stream_label!r} already forked")
        self._labels.add(stream_label)
        return SeededRng(self.seed, stream_label)

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for fire_at, seq, target in self.trace or ():
            h.update(f"{fire_at},{seq},{target}\n".encode())
        return h.hexdigest()
