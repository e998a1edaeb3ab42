"""A simulated GPU process: one CPU thread replaying a trace through the
interception layer, per-stream FIFO executors, and the engines.

The CPU issues calls at zero simulated cost. Launches and memcpys become DAG
nodes queued on their stream; synchronizations block the CPU until their
scope has drained and then clear the DAG. A C/R session plugs in through the
``Session`` hooks.
"""

from __future__ import annotations

import bisect
import hashlib
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from gpucrsim.api import ApiCall, ApiKind, RuleAction, rule_for
from gpucrsim.config import SimConfig, transfer_ns
from gpucrsim.dag import KernelDag, KernelNode
from gpucrsim.errors import BadState, FreedBuffer, InvalidLocator, UseAfterFree
from gpucrsim.sim import effects
from gpucrsim.sim.clock import SimClock
from gpucrsim.sim.engines import ChecksumEngine, Channel, Priority, Transfer
from gpucrsim.sim.memory import BufferStatus, Device, GpuBuffer, HostMemory, initial_page
from gpucrsim.speculation import infer_access, memcpy_endpoints


@dataclass
class KernelRun:
    node_id: int
    seq: int
    stream: int
    start: int
    end: int | None = None
    inputs_loaded: bool = True


class Session:
    """No-op C/R hooks; concrete protocols override what they need."""

    def gate(self, node: KernelNode) -> bool:
        return True

    def instrumented(self, node: KernelNode) -> bool:
        return False

    def on_start(self, node: KernelNode, run: KernelRun) -> None:
        pass

    def on_complete(self, node: KernelNode, run: KernelRun) -> None:
        pass

    def pre_clear(self, nodes: list[KernelNode]) -> None:
        pass

    def on_alloc(self, buf: GpuBuffer) -> None:
        pass

    def on_free(self, buf: GpuBuffer) -> None:
        pass


class StallMeter:
    """Union of intervals during which any blocking reason is active."""

    def __init__(self, clock: SimClock):
        self.clock = clock
        self.active: set[object] = set()
        self.total = 0
        self._since = 0

    def begin(self, reason: object) -> None:
        if reason in self.active:
            return
        if not self.active:
            self._since = self.clock.now
        self.active.add(reason)

    def end(self, reason: object) -> None:
        if reason not in self.active:
            return
        self.active.discard(reason)
        if not self.active:
            self.total += self.clock.now - self._since

    @property
    def value(self) -> int:
        return self.total + (self.clock.now - self._since if self.active else 0)


class GpuProcess:
    def __init__(self, cfg: SimConfig, trace: list[ApiCall] | None = None,
                 clock: SimClock | None = None, priority_aware: bool = True):
        self.cfg = cfg
        self.clock = clock or SimClock(cfg.max_events)
        self.device = Device(cfg.device_capacity, cfg.chunk_size)
        self.host = HostMemory(cfg.page_size)
        self.pcie = Channel("pcie", self.clock, cfg.pcie_bw, cfg.chunk_size, priority_aware)
        self.devchan = Channel("device", self.clock, cfg.device_bw, cfg.chunk_size)
        self.network = Channel("network", self.clock, cfg.network_bw, cfg.chunk_size)
        self.checksum = ChecksumEngine(self.clock, cfg.checksum_bw)
        self.dag = KernelDag()
        self.streams: set[int] = {0}
        self.queues: dict[int, deque[int]] = {0: deque()}
        self.running: dict[int, int] = {}
        self.trace: list[ApiCall] = trace or []
        self.pc = 0
        self.cursor = -1
        self.blocked = False
        self.paused: set[str] = set()
        self.holds: set[str] = set()
        self.session: Session | None = None
        self.log: list[KernelRun] = []
        self.stall = StallMeter(self.clock)
        self.first_kernel_at: int | None = None
        self.busy_kernel_ns = 0
        self._runs: dict[int, KernelRun] = {}
        self._trigger: tuple[int, Callable[[], None]] | None = None
        self._drain_waiters: list[Callable[[], None]] = []
        self._cpu_pending = False
        self._kicking = False

    # -- driving ----------------------------------------------------------------

    def start(self, at_seq: int = 0) -> None:
        seqs = [c.seq for c in self.trace]
        self.pc = bisect.bisect_left(seqs, at_seq)
        self.wake_cpu()

    def run(self) -> int:
        self.clock.run_until()
        if not self.finished():
            raise BadState(f"process stalled at seq {self.cursor} "
                           f"(pc={self.pc}, holds={sorted(self.holds)}, paused={sorted(self.paused)})")
        return self.clock.now

    def finished(self) -> bool:
        return (self.pc >= len(self.trace) and not self.running
                and not any(self.queues.values()))

    def set_trigger(self, seq: int, fn: Callable[[], None]) -> None:
        """Call ``fn`` right after the call with this seq has been admitted."""
        self._trigger = (seq, fn)

    def wake_cpu(self) -> None:
        if not self._cpu_pending:
            self._cpu_pending = True
            self.clock.after(0, self._cpu_loop)

    def pause(self, reason: str) -> None:
        self.paused.add(reason)

    def unpause(self, reason: str) -> None:
        self.paused.discard(reason)
        self.wake_cpu()

    def hold(self, reason: str) -> None:
        self.holds.add(reason)

    def release(self, reason: str) -> None:
        self.holds.discard(reason)
        self.kick_all()

    def when_drained(self, fn: Callable[[], None]) -> None:
        """Run ``fn`` once no kernel is executing (queued ones may remain)."""
        if not self.running:
            self.clock.after(0, fn)
        else:
            self._drain_waiters.append(fn)

    # -- CPU thread -------------------------------------------------------------------

    def _cpu_loop(self) -> None:
        self._cpu_pending = False
        while self.pc < len(self.trace) and not self.paused:
            call = self.trace[self.pc]
            if not self.issue(call):
                self.blocked = True
                return
            self.blocked = False
            self.pc += 1
            self.cursor = call.seq
            if self._trigger is not None and call.seq == self._trigger[0]:
                fn = self._trigger[1]
                self._trigger = None
                fn()

    def issue(self, call: ApiCall) -> bool:
        """Apply the rule for one call. False means the CPU must block."""
        rule = rule_for(call.kind)
        if rule.action is RuleAction.SKIP:
            return True
        if rule.action is RuleAction.REGISTER:
            self._register(call)
            return True
        if rule.action is RuleAction.CLEAR_DAG:
            if rule.scope == "device":
                if self.running or any(self.queues.values()):
                    return False
                self.dag.clear("device", pre_clear=self._pre_clear)
            else:
                s = call.stream or 0
                if s in self.running or self.queues.get(s):
                    return False
                self.dag.clear("stream", s, pre_clear=self._pre_clear)
            return True
        stream = call.stream or 0
        if stream not in self.streams:
            raise BadState(f"seq {call.seq}: stream {stream} does not exist")
        effects.host_write_at_issue(call, self.host)
        spec = infer_access(call, self.device)
        nid = self.dag.add_kernel(call, spec, self._is_active)
        self.queues[stream].append(nid)
        self.kick(stream)
        return True

    def _pre_clear(self, nodes):
        if self.session is not None:
            self.session.pre_clear(nodes)

    def _is_active(self, handle: int) -> bool:
        buf = self.device.buffers.get(handle)
        return buf is not None and buf.status is BufferStatus.ACTIVE

    def _register(self, call: ApiCall) -> None:
        kind = call.kind
        if kind is ApiKind.MALLOC:
            buf = self.device.alloc(call.bytes)
            if self.session is not None:
                self.session.on_alloc(buf)
        elif kind is ApiKind.FREE:
            buf = self.device.lookup(call.args[0][0])
            if buf is None:
                raise InvalidLocator(f"seq {call.seq}: free of unknown address")
            if self.dag.references(buf.handle):
                raise FreedBuffer(f"seq {call.seq}: buffer {buf.handle} still referenced by the DAG")
            if self.session is not None:
                self.session.on_free(buf)
            self.device.free(buf.handle)
        elif kind is ApiKind.STREAM_CREATE:
            self.streams.add(call.stream)
            self.queues.setdefault(call.stream, deque())
        elif kind is ApiKind.STREAM_DESTROY:
            if self.queues.get(call.stream) or call.stream in self.running:
                raise BadState(f"seq {call.seq}: destroying busy stream {call.stream}")
            self.streams.discard(call.stream)
            self.queues.pop(call.stream, None)

    def add_stream(self, stream: int) -> None:
        self.streams.add(stream)
        self.queues.setdefault(stream, deque())

    # -- stream executors -----------------------------------------------------------

    def kick_all(self) -> None:
        if self._kicking:
            return
        self._kicking = True
        try:
            for s in sorted(self.queues):
                self.kick(s)
        finally:
            self._kicking = False

    def kick(self, stream: int) -> None:
        if stream in self.running or self.holds:
            return
        q = self.queues.get(stream)
        if not q:
            return
        nid = q[0]
        if not self.dag.ready(nid):
            return
        node = self.dag.kernels[nid]
        if self.session is not None and not self.session.gate(node):
            return
        if stream in self.running or self.holds or not q or q[0] != nid:
            return
        self._start(node)

    def _start(self, node: KernelNode) -> None:
        call = node.call
        self.queues[node.stream].popleft()
        self.dag.mark_running(node.id)
        for h in set(call.true_reads) | set(call.true_writes):
            if not self._is_active(h):
                raise UseAfterFree(f"seq {call.seq} touches freed buffer {h}")
        self.running[node.stream] = node.id
        run = KernelRun(node.id, call.seq, node.stream, self.clock.now)
        self._runs[node.id] = run
        if self.first_kernel_at is None:
            self.first_kernel_at = self.clock.now
        if self.session is not None:
            self.session.on_start(node, run)
        done = lambda: self._complete(node)
        if call.kind in (ApiKind.MEMCPY_H2D, ApiKind.MEMCPY_D2H):
            _, _, count = memcpy_endpoints(call)
            self.pcie.submit(Transfer(count, Priority.APP, on_done=done, tag=("app", node.id)))
        elif call.kind is ApiKind.MEMCPY_D2D:
            _, _, count = memcpy_endpoints(call)
            self.clock.after(transfer_ns(count, self.cfg.device_bw), done)
        else:
            dur = call.duration_ns
            if self.session is not None and self.session.instrumented(node):
                dur = int(round(dur * self.cfg.instrumentation_factor))
            self.busy_kernel_ns += dur
            self.clock.after(dur, done)

    def _complete(self, node: KernelNode) -> None:
        effects.apply(node.call, self.device, self.host)
        self.dag.on_kernel_complete(node.id)
        run = self._runs.pop(node.id)
        run.end = self.clock.now
        self.log.append(run)
        del self.running[node.stream]
        if self.session is not None:
            self.session.on_complete(node, run)
        if not self.running and self._drain_waiters:
            waiters, self._drain_waiters = self._drain_waiters, []
            for fn in waiters:
                fn()
        self.kick_all()
        if self.blocked:
            self.wake_cpu()

    # -- state ----------------------------------------------------------------------------

    def buffer_state(self) -> dict[int, bytes]:
        return {b.handle: b.data.tobytes() for b in self.device.active()}

    def host_state(self) -> dict[int, bytes]:
        return self.host.snapshot()


def states_equal(a: GpuProcess, b: GpuProcess) -> bool:
    """Bit equality of device buffers (with addresses) and host memory."""
    if [(x.handle, x.base, x.size) for x in a.device.active()] != \
            [(x.handle, x.base, x.size) for x in b.device.active()]:
        return False
    for x in a.device.active():
        if not np.array_equal(x.data, b.device.get(x.handle).data):
            return False
    ps = a.host.page_size
    for idx in set(a.host.pages) | set(b.host.pages):
        pa = a.host.pages.get(idx)
        pb = b.host.pages.get(idx)
        pa = initial_page(idx, ps) if pa is None else pa
        pb = initial_page(idx, ps) if pb is None else pb
        if not np.array_equal(pa, pb):
            return False
    return True


def state_digest(proc: GpuProcess) -> str:
    h = hashlib.sha256()
    for buf in proc.device.active():
        h.update(f"{buf.handle}:{buf.base}:{buf.size}".encode())
        h.update(buf.data.tobytes())
    ps = proc.host.page_size
    for idx in sorted(proc.host.pages):
        page = proc.host.pages[idx]
        if not np.array_equal(page, initial_page(idx, ps)):
            h.update(idx.to_bytes(8, "little"))
            h.update(page.tobytes())
    return h.hexdigest()
