"""Virtual-time event loop."""

from __future__ import annotations

import heapq
import itertools


class EventLoop:
    """Priority queue of callbacks ordered by (time, insertion order)."""

    def __init__(self, start_ms: float = 0.0):
        self.now = start_ms
        self._queue = []
        self._seq = itertools.count()
        self.processed = 0

    def at(self, t: float, fn, *args) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule at {t} before now={self.now}")
        heapq.heappush(self._queue, (t, next(self._seq), fn, args))

    def after(self, dt: float, fn, *args) -> None:
        self.at(self.now + dt, fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: float) -> None:
        q = self._queue
        while q and q[0][0] <= until:
            t, _, fn, args = heapq.heappop(q)
            self.now = t
            self.processed += 1
            fn(*args)
        self.now = max(self.now, until)
