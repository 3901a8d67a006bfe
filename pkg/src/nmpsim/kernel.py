"""Tiny deterministic discrete-event kernel.

Time is an integer tick count on a 42 GHz base clock, the least common
multiple of the memory (1200 MHz), NME (500 MHz) and CAE (700 MHz) clocks, so
every clock edge of every domain lands on an exact tick.
"""

from __future__ import annotations

import heapq
from typing import Callable, Generator

TICK_HZ = 42_000_000_000
MEM_TICKS = 35      # 1200 MHz
EU_TICKS = 84       # 500 MHz
CAE_TICKS = 60      # 700 MHz


def mem_cycle_at_or_after(tick: int) -> int:
    return -(-tick // MEM_TICKS)


class Event:
    __slots__ = ("kernel", "callbacks", "triggered", "value")

    def __init__(self, kernel: "Kernel"):
        self.kernel = kernel
        self.callbacks = []
        self.triggered = False
        self.value = None

    def succeed(self, value=None) -> "Event":
        if self.triggered:
            raise RuntimeError("event triggered twice")
        self.triggered = True
        self.value = value
        for cb in self.callbacks:
            self.kernel.at(self.kernel.now, cb, self)
        self.callbacks = None
        return self

    def on(self, cb: Callable) -> None:
        if self.triggered:
            self.kernel.at(self.kernel.now, cb, self)
        else:
            self.callbacks.append(cb)


class Kernel:
    def __init__(self):
        self.now = 0
        self._heap = []
        self._seq = 0

    def at(self, t: int, fn: Callable, *args) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.now})")
        heapq.heappush(self._heap, (t, self._seq, fn, args))
        self._seq += 1

    def event(self) -> Event:
        return Event(self)

    def until(self, t: int) -> Event:
        ev = Event(self)
        self.at(max(t, self.now), lambda: ev.succeed())
        return ev

    def timeout(self, delay: int) -> Event:
        return self.until(self.now + delay)

    def all_of(self, events) -> Event:
        events = list(events)
        done = Event(self)
        pending = [len(events)]
        if not events:
            self.at(self.now, lambda: done.succeed())
            return done

        def one(_):
            pending[0] -= 1
            if pending[0] == 0:
                done.succeed()
        for ev in events:
            ev.on(one)
        return done

    def process(self, gen: Generator) -> Event:
        """Run a generator that yields Events; returns an Event fired on exit."""
        done = Event(self)

        def step(ev):
            try:
                nxt = gen.send(None if ev is None else ev.value)
            except StopIteration as stop:
                done.succeed(stop.value)
                return
            nxt.on(step)
        self.at(self.now, step, None)
        return done

    def run(self) -> int:
        heap = self._heap
        while heap:
            t, _, fn, args = heapq.heappop(heap)
            self.now = t
            fn(*args)
        return self.now


class BusTimeline:
    """A serially-reused resource: reservations are granted in request order."""

    __slots__ = ("free_at", "busy")

    def __init__(self):
        self.free_at = 0
        self.busy = 0

    def reserve(self, earliest: int, duration: int) -> int:
        start = max(earliest, self.free_at)
        self.free_at = start + duration
        self.busy += duration
        return start
