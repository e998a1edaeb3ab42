"""Bandwidth-limited engines: transfer channels and the checksum engine.

A channel moves one chunk at a time. Between chunks it picks the next chunk
from the application queue before the checkpoint queue, so an application
transfer waits at most for the chunk already on the wire.
"""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from gpucrsim.config import transfer_ns
from gpucrsim.errors import InvalidLocator
from gpucrsim.sim.clock import SimClock


class Priority(enum.IntEnum):
    APP = 0
    CKPT = 1


_ids = itertools.count(1)


@dataclass(eq=False)
class Transfer:
    nbytes: int
    priority: Priority
    on_chunk: Callable[[int, int], None] | None = None
    on_chunk_start: Callable[[int, int], None] | None = None
    on_done: Callable[[], None] | None = None
    tag: object = None
    id: int = field(default_factory=lambda: next(_ids))
    offset: int = 0
    started_at: int | None = None
    finished_at: int | None = None
    cancelled: bool = False

    @property
    def done(self) -> bool:
        return self.finished_at is not None


class Channel:
    def __init__(self, name: str, clock: SimClock, bandwidth: int, chunk_size: int,
                 priority_aware: bool = True):
        self.name = name
        self.clock = clock
        self.bandwidth = bandwidth
        self.chunk_size = chunk_size
        self.priority_aware = priority_aware
        self.queues = {Priority.APP: deque(), Priority.CKPT: deque()}
        self._fifo: deque[Transfer] = deque()
        self.current: Transfer | None = None
        self.busy_ns = 0
        self.bytes_moved = 0

    def submit(self, tr: Transfer) -> Transfer:
        if tr.nbytes <= 0:
            raise InvalidLocator("transfer size must be positive")
        if self.priority_aware:
            self.queues[tr.priority].append(tr)
        else:
            self._fifo.append(tr)
        self._kick()
        return tr

    def cancel(self, tr: Transfer) -> None:
        tr.cancelled = True
        for q in (*self.queues.values(), self._fifo):
            if tr in q:
                q.remove(tr)

    def promote(self, tr: Transfer, priority: Priority | None = None) -> None:
        """Move a queued transfer to the front of its (possibly new) class."""
        if tr.done or tr.cancelled:
            return
        if tr is self.current:
            if priority is not None:
                tr.priority = priority
            return
        for q in (*self.queues.values(), self._fifo):
            if tr in q:
                q.remove(tr)
        if priority is not None:
            tr.priority = priority
        if self.priority_aware:
            self.queues[tr.priority].appendleft(tr)
        else:
            self._fifo.appendleft(tr)

    def pending(self) -> int:
        return sum(len(q) for q in self.queues.values()) + len(self._fifo) + (self.current is not None)

    def idle(self) -> bool:
        return self.pending() == 0

    def queued_bytes(self) -> int:
        total = 0
        for q in (*self.queues.values(), self._fifo):
            total += sum(t.nbytes - t.offset for t in q)
        return total

    def _next(self) -> Transfer | None:
        if not self.priority_aware:
            return self._fifo[0] if self._fifo else None
        for prio in (Priority.APP, Priority.CKPT):
            if self.queues[prio]:
                return self.queues[prio][0]
        return None

    def _kick(self) -> None:
        if self.current is not None:
            return
        tr = self._next()
        if tr is None:
            return
        self.current = tr
        n = min(self.chunk_size, tr.nbytes - tr.offset)
        if tr.started_at is None:
            tr.started_at = self.clock.now
        if tr.on_chunk_start is not None:
            tr.on_chunk_start(tr.offset, n)
        dt = transfer_ns(n, self.bandwidth)
        self.busy_ns += dt
        self.clock.after(dt, lambda: self._chunk_done(tr, n))

    def _chunk_done(self, tr: Transfer, n: int) -> None:
        self.current = None
        self.bytes_moved += n
        if not tr.cancelled:
            off = tr.offset
            tr.offset += n
            finished = tr.offset >= tr.nbytes
            if finished:
                for q in (*self.queues.values(), self._fifo):
                    if q and q[0] is tr:
                        q.popleft()
                        break
                else:
                    for q in (*self.queues.values(), self._fifo):
                        if tr in q:
                            q.remove(tr)
                tr.finished_at = self.clock.now
            if tr.on_chunk is not None:
                tr.on_chunk(off, n)
            if finished and tr.on_done is not None:
                tr.on_done()
        self._kick()


class ChecksumEngine:
    """Serial CRC engine; jobs complete at the rate-limited pace."""

    def __init__(self, clock: SimClock, bandwidth: int):
        self.clock = clock
        self.bandwidth = bandwidth
        self.free_at = 0
        self.busy_ns = 0

    def submit(self, nbytes: int, on_done: Callable[[], None]) -> int:
        start = max(self.clock.now, self.free_at)
        dt = transfer_ns(nbytes, self.bandwidth) if nbytes > 0 else 0
        self.free_at = start + dt
        self.busy_ns += dt
        self.clock.schedule(on_done, self.free_at)
        return self.free_at
