"""Discrete-event clock.

Events are plain callbacks. Ties at one timestamp fire in insertion order,
which is what makes whole runs reproducible.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable

from gpucrsim.errors import Livelock, PastTime


class SimClock:
    def __init__(self, max_events: int = 10**8):
        self.now = 0
        self.max_events = max_events
        self.fired = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()

    def __len__(self):
        return len(self._heap) - len(self._cancelled)

    def schedule(self, fn: Callable[[], None], at: int) -> int:
        if at < self.now:
            raise PastTime(f"event at {at} < now {self.now}")
        eid = next(self._seq)
        heapq.heappush(self._heap, (at, eid, fn))
        return eid

    def after(self, delay: int, fn: Callable[[], None]) -> int:
        return self.schedule(fn, self.now + delay)

    def cancel(self, eid: int) -> None:
        self._cancelled.add(eid)

    def peek_time(self) -> int | None:
        while self._heap and self._heap[0][1] in self._cancelled:
            _, eid, _ = heapq.heappop(self._heap)
            self._cancelled.discard(eid)
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        if self.peek_time() is None:
            return False
        at, _, fn = heapq.heappop(self._heap)
        self.now = at
        self.fired += 1
        if self.fired > self.max_events:
            raise Livelock(f"more than {self.max_events} events processed")
        fn()
        return True

    def run_until(self, time: int | None = None,
                  until: Callable[[], bool] | None = None) -> int:
        """Process events until ``time`` is passed, ``until()`` holds, or the
        queue drains (quiescence). Returns the final clock value."""
        while True:
            if until is not None and until():
                break
            nxt = self.peek_time()
            if nxt is None:
                break
            if time is not None and nxt > time:
                self.now = max(self.now, time)
                break
            self.step()
        return self.now
