"""Checkpoint protocols: stop-the-world, soft copy-on-write, soft dirty-bit.

Each session is started by a trigger on the simulated process, runs inside
the event loop, and leaves a ``CheckpointImage`` plus a ``MetricsReport``.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from gpucrsim.api import ApiKind
from gpucrsim.config import transfer_ns
from gpucrsim.cr.metrics import MetricsReport
from gpucrsim.dag import KernelDag, KernelNode, NodeState
from gpucrsim.image import (FLAG_DEDUP, Allocation, CheckpointImage, GpuRecord, RecordKind,
                            write_image)
from gpucrsim.process import GpuProcess, KernelRun, Session
from gpucrsim.sim.engines import Priority, Transfer
from gpucrsim.sim.memory import ChunkState, GpuBuffer, Upstream
from gpucrsim.speculation import Phase, validate


class CheckpointSession(Session):
    mode = "base"

    def __init__(self, proc: GpuProcess, target: str = "memory", resume: bool = True,
                 coordinated: bool = True, on_done: Callable[["CheckpointSession"], None] | None = None):
        self.proc = proc
        self.cfg = proc.cfg
        self.channel = proc.network if target == "network" else proc.pcie
        self.resume = resume
        self.coordinated = coordinated
        self.on_done = on_done
        self.metrics = MetricsReport(self.mode)
        self.image: CheckpointImage | None = None
        self.image_data: bytes | None = None
        self.done = False
        self.final_bytes = 0
        self.dag_bytes = 0
        self._gen = 0
        self._transfers: dict[int, Transfer] = {}
        self._stall0 = 0

    # -- lifecycle ------------------------------------------------------------------

    def begin(self) -> None:
        proc = self.proc
        if proc.session is not None:
            raise RuntimeError("a C/R session is already active")
        proc.session = self
        proc.dag.keep_done = True
        self._stall0 = proc.stall.value
        self._stop("stop", self._stopped)

    def _stopped(self) -> None:
        raise NotImplementedError

    def _stop(self, reason: str, then: Callable[[], None]) -> None:
        self.proc.pause(reason)
        self.proc.hold(reason)
        self.proc.stall.begin(reason)
        self.proc.when_drained(then)

    def _resume(self, reason: str) -> None:
        self.proc.stall.end(reason)
        self.proc.release(reason)
        self.proc.unpause(reason)

    def _finish(self, image: CheckpointImage) -> None:
        proc = self.proc
        self.image = image
        self.image_data = write_image(image)
        self.metrics.image_bytes = len(self.image_data)
        self.done = True
        proc.session = None
        proc.dag.keep_done = False
        proc.dag.retained = False
        proc.dag.collect_done()
        for reason in [r for r in proc.stall.active if isinstance(r, tuple) and r[0] == "delay"]:
            proc.stall.end(reason)
        if self.resume:
            for reason in list(proc.holds):
                self._resume(reason)
            for reason in list(proc.paused):
                self._resume(reason)
        self.metrics.stall_ns = proc.stall.value - self._stall0
        if self.on_done is not None:
            self.on_done(self)

    # -- helpers -----------------------------------------------------------------------

    def _meta(self) -> dict:
        dev = self.proc.device
        return dict(
            allocations=[Allocation(b.handle, b.base, b.size) for b in dev.active()],
            streams=sorted(s for s in self.proc.streams if s != 0),
            next_addr=dev.next_addr, next_handle=dev.next_handle, cursor=self.proc.cursor,
        )

    def _image(self, records: list[GpuRecord], host: dict[int, bytes], dag: KernelDag,
               meta: dict) -> CheckpointImage:
        flags = FLAG_DEDUP if (self.cfg.dedup and self.mode != "stw") else 0
        return CheckpointImage(host_pages=host, gpu=sorted(records, key=lambda r: r.handle),
                               dag=dag, flags=flags, **meta)

    def _send_all(self, sizes: list[int], then: Callable[[], None]) -> None:
        """Queue transfers in order at checkpoint priority; ``then`` runs when
        the last completes."""
        sizes = [s for s in sizes if s > 0]
        self.final_bytes += sum(sizes)
        if not sizes:
            self.proc.clock.after(0, then)
            return
        left = [len(sizes)]
        gen = self._gen

        def one_done():
            left[0] -= 1
            if left[0] == 0 and gen == self._gen:
                then()

        for s in sizes:
            self.channel.submit(Transfer(s, Priority.CKPT, on_done=one_done, tag="ckpt"))

    def dedup_candidate(self, buf: GpuBuffer) -> bool:
        up = buf.upstream
        if not self.cfg.dedup or up is None:
            return False
        hw = self.proc.host.hw_dirty
        return not any(p in hw for p in range(up.first_page, up.first_page + up.n_pages))

    def dedup_holds(self, buf: GpuBuffer, up: Upstream, data: np.ndarray) -> bool:
        hw = self.proc.host.hw_dirty
        if any(p in hw for p in range(up.first_page, up.first_page + up.n_pages)):
            return False
        return zlib.crc32(data.tobytes()) == up.crc

    def _stw_capture(self, reason: str = "stop") -> None:
        """Snapshot everything now (the application is stopped), ship it, resume."""
        proc = self.proc
        self._gen += 1
        t_stop = proc.clock.now
        records = [GpuRecord(b.handle, RecordKind.INLINE, data=b.data.tobytes())
                   for b in proc.device.active()]
        host = proc.host.snapshot()
        dag = proc.dag.pending_copy()
        dag_data = dag.serialize()
        self.dag_bytes = len(dag_data)
        meta = self._meta()
        gpu_bytes = sum(len(r.data) for r in records)
        host_bytes = sum(len(p) for p in host.values())
        self.metrics.bytes_precopy = gpu_bytes + host_bytes
        self.final_bytes = 0
        sizes = [len(r.data) for r in records] + [host_bytes, len(dag_data)]

        def shipped():
            self.metrics.downtime_ns = proc.clock.now - t_stop
            self._finish(self._image(records, host, dag, meta))

        self._send_all(sizes, shipped)

    def instrumented(self, node: KernelNode) -> bool:
        return not self.done and node.call.kind is ApiKind.LAUNCH_OPAQUE


class StwSession(CheckpointSession):
    """Base protocol: halt, copy everything, resume."""

    mode = "stw"

    def instrumented(self, node):
        return False

    def _stopped(self) -> None:
        self._stw_capture("stop")


class CowSession(CheckpointSession):
    """Soft copy-on-write: the image is the state at the initial stop."""

    mode = "cow"

    def __init__(self, proc, **kw):
        super().__init__(proc, **kw)
        self.offenders: set[str] = set()
        self.restarts = 0
        self.fallback_stw = False
        self.copying = False
        self.pending: dict[int, GpuBuffer] = {}
        self.staged: dict[int, np.ndarray] = {}
        self.staging_inflight: set[int] = set()
        self.staging_used = 0
        self.delays = 0

    def _stopped(self) -> None:
        proc = self.proc
        if self.fallback_stw:
            self._stw_capture()
            return
        self._gen += 1
        gen = self._gen
        self.t0 = proc.clock.now
        self.cursor = proc.cursor
        self.host_snap = proc.host.snapshot()
        self.hw_dirty0 = set(proc.host.hw_dirty)
        self.dag_snap = proc.dag.pending_copy()
        self.meta = self._meta()
        self.pending = {}
        self.captured: dict[int, np.ndarray] = {}
        self.upstream0: dict[int, Upstream] = {}
        self.dedup: dict[int, Upstream] = {}
        self.staged, self.staging_inflight, self.staging_used = {}, set(), 0
        self._transfers = {}
        later = []
        for buf in proc.device.active():
            buf.reset_chunks()
            self.pending[buf.handle] = buf
            self.captured[buf.handle] = np.empty(buf.size, dtype=np.uint8)
            if self.dedup_candidate(buf):
                self.upstream0[buf.handle] = buf.upstream
                later.append(buf)
            else:
                self._queue(buf)
        for buf in later:
            self._queue(buf)
            proc.checksum.submit(buf.size, lambda h=buf.handle: self._checksum_done(h, gen))
        self.copying = True
        self._resume("stop")
        if not self.pending:
            self._gpu_done()

    def _queue(self, buf: GpuBuffer) -> None:
        h = buf.handle
        cs = buf.chunk_size

        def start(off, n):
            buf.chunks[off // cs] = ChunkState.COPYING

        def chunk(off, n):
            src = self.staged.get(h, buf.data)
            self.captured[h][off:off + n] = src[off:off + n]
            buf.chunks[off // cs] = ChunkState.COPIED
            if off + n >= buf.size:
                self._buffer_done(h)

        tr = Transfer(buf.size, Priority.CKPT, on_chunk=chunk, on_chunk_start=start, tag=("ckpt", h))
        self._transfers[h] = tr
        self.channel.submit(tr)

    def _buffer_done(self, h: int) -> None:
        buf = self.pending.pop(h, None)
        if buf is None:
            return
        if self.staged.pop(h, None) is not None:
            self.staging_used -= buf.size
        self._transfers.pop(h, None)
        self.proc.kick_all()
        if not self.pending and self.copying:
            self._gpu_done()

    def _checksum_done(self, h: int, gen: int) -> None:
        if gen != self._gen or h not in self.pending:
            return
        buf = self.pending[h]
        up = self.upstream0[h]
        data = self.staged.get(h, buf.data)
        if any(p in self.hw_dirty0 for p in range(up.first_page, up.first_page + up.n_pages)):
            return
        if zlib.crc32(data.tobytes()) != up.crc:
            return
        self.dedup[h] = up
        tr = self._transfers.get(h)
        if tr is not None:
            self.channel.cancel(tr)
        buf.chunks[:] = ChunkState.COPIED
        self._buffer_done(h)

    def gate(self, node: KernelNode) -> bool:
        if not self.copying:
            return True
        proc = self.proc
        key = ("delay", node.id)
        if node.call.kind is ApiKind.LAUNCH_OPAQUE and node.call.kernel_name in self.offenders:
            self._request_stw()
            return False
        conflicts = [h for h in sorted(node.spec.writes) if h in self.pending and h not in self.staged]
        waiting = [h for h in node.spec.writes if h in self.staging_inflight]
        if not conflicts and not waiting:
            proc.stall.end(key)
            return True
        if key not in proc.stall.active:
            self.delays += 1
        proc.stall.begin(key)
        if conflicts:
            remaining = sum(self.pending[h].remaining_bytes() for h in conflicts)
            est = transfer_ns(remaining, self.channel.bandwidth)
            need = sum(self.pending[h].size for h in conflicts)
            if est <= self.cfg.cow_delay_threshold_ns or \
                    self.staging_used + need > self.cfg.staging_capacity:
                for h in conflicts:
                    tr = self._transfers.get(h)
                    if tr is not None:
                        self.channel.promote(tr)
            else:
                for h in conflicts:
                    self._stage(self.pending[h])
        return False

    def _stage(self, buf: GpuBuffer) -> None:
        h = buf.handle
        gen = self._gen
        self.staged[h] = buf.data.copy()
        self.staging_used += buf.size
        self.metrics.cow_copies += 1
        self.staging_inflight.add(h)

        def staged():
            if gen != self._gen:
                return
            self.staging_inflight.discard(h)
            self.proc.kick_all()

        self.proc.devchan.submit(Transfer(buf.size, Priority.CKPT, on_done=staged, tag=("stage", h)))

    def on_complete(self, node: KernelNode, run: KernelRun) -> None:
        if not self.copying or node.call.kind is not ApiKind.LAUNCH_OPAQUE:
            return
        report = validate(node.id, node.spec, node.call.true_reads, node.call.true_writes,
                          Phase.CHECKPOINT)
        if report.ok:
            return
        self.metrics.validation_failures += 1
        self.offenders.add(node.call.kernel_name)
        self._abort()
        self.restarts += 1
        self._stop("stop", self._stopped)

    def on_free(self, buf: GpuBuffer) -> None:
        if self.copying and buf.handle in self.pending and buf.handle not in self.staged:
            self.staged[buf.handle] = buf.data.copy()
            self.staging_used += buf.size

    def _abort(self) -> None:
        self._gen += 1
        self.copying = False
        for tr in self._transfers.values():
            self.channel.cancel(tr)
        self._transfers = {}
        self.pending = {}
        self.staged, self.staging_inflight, self.staging_used = {}, set(), 0
        proc = self.proc
        for reason in [r for r in proc.stall.active if isinstance(r, tuple) and r[0] == "delay"]:
            proc.stall.end(reason)

    def _request_stw(self) -> None:
        if self.fallback_stw:
            return
        self.fallback_stw = True
        self._abort()
        self._stop("stop", self._stopped)

    def _gpu_done(self) -> None:
        self.copying = False
        proc = self.proc
        for reason in [r for r in proc.stall.active if isinstance(r, tuple) and r[0] == "delay"]:
            proc.stall.end(reason)
        proc.kick_all()
        records = []
        inline = 0
        for a in self.meta["allocations"]:
            up = self.dedup.get(a.handle)
            if up is not None:
                records.append(GpuRecord(a.handle, RecordKind.DEDUP_REF, first_page=up.first_page,
                                         n_pages=up.n_pages, crc=up.crc))
                self.metrics.bytes_dedup_saved += a.size
            else:
                records.append(GpuRecord(a.handle, RecordKind.INLINE,
                                         data=self.captured[a.handle].tobytes()))
                inline += a.size
        host_bytes = sum(len(p) for p in self.host_snap.values())
        self.metrics.bytes_precopy = inline + host_bytes
        dag_data = self.dag_snap.serialize()
        self.dag_bytes = len(dag_data)
        meta = dict(self.meta)
        image = self._image(records, self.host_snap, self.dag_snap, meta)
        self._send_all([host_bytes, len(dag_data)], lambda: self._finish(image))


class DirtyBitSession(CheckpointSession):
    """Soft dirty-bit pre-copy; the image is the state at the final stop."""

    mode = "dirty"

    def __init__(self, proc, **kw):
        super().__init__(proc, **kw)
        self.dirty: set[int] = set()
        self.active = False          # dirty recording on
        self.precopy_over = False
        self.retaining = False
        self.retain_drained = False
        self.retain_dirty_count = 0
        self.dirty_bytes_after_retain = 0
        self.gpu_phase_dirty: int | None = None
        self.gpu_dirty_bytes = 0
        self.n_active0 = 0
        self.crossing: set[int] = set()
        self.inflight: set[int] = set()
        self.recompute: dict[int, tuple[int, ...]] = {}
        self.gpu_dirty_fraction = 0.0
        self.cpu_dirty_fraction = 0.0
        self._recorded: set[int] = set()

    def _stopped(self) -> None:
        proc = self.proc
        self._gen += 1
        gen = self._gen
        self.t0 = proc.clock.now
        self.captured: dict[int, np.ndarray] = {}
        self.fresh: dict[int, str] = {}          # handle -> "precopy" | "dirty"
        self.dedup_ok: dict[int, Upstream] = {}
        self.pending_checks: set[int] = set()
        self.host_captured: dict[int, tuple[bytes, int]] = {}
        self.host_outstanding = 0
        self.host_started = False
        self.n_active0 = len(proc.device.active())
        gpu = []
        for buf in proc.device.active():
            buf.reset_chunks()
            if self.dedup_candidate(buf):
                self.pending_checks.add(buf.handle)
                proc.checksum.submit(buf.size, lambda h=buf.handle: self._checksum_done(h, gen))
            else:
                gpu.append(buf)
        if self.coordinated:
            for buf in gpu:
                self._queue(buf, "precopy")
        else:
            pieces = self._host_pieces()
            self.host_started = True
            for i in range(max(len(gpu), len(pieces))):
                if i < len(gpu):
                    self._queue(gpu[i], "precopy")
                if i < len(pieces):
                    self._send_host_piece(pieces[i])
        self.active = True
        self._resume("stop")
        self._maybe_precopy_done()

    # -- GPU pre-copy --------------------------------------------------------------

    def _queue(self, buf: GpuBuffer, source: str) -> None:
        h = buf.handle
        cs = buf.chunk_size
        gen = self._gen
        self.captured[h] = np.empty(buf.size, dtype=np.uint8)

        def start(off, n):
            buf.chunks[off // cs] = ChunkState.COPYING

        def chunk(off, n):
            self.captured[h][off:off + n] = buf.data[off:off + n]
            buf.chunks[off // cs] = ChunkState.COPIED
            if off + n >= buf.size and gen == self._gen:
                self._transfers.pop(h, None)
                self.fresh[h] = source
                self._maybe_precopy_done()

        tr = Transfer(buf.size, Priority.CKPT, on_chunk=chunk, on_chunk_start=start, tag=("ckpt", h))
        self._transfers[h] = tr
        self.channel.submit(tr)

    def _checksum_done(self, h: int, gen: int) -> None:
        if gen != self._gen:
            return
        self.pending_checks.discard(h)
        buf = self.proc.device.buffers.get(h)
        if buf is not None and self.proc._is_active(h) and h not in self.dirty and self.active:
            if self.dedup_holds(buf, buf.upstream, buf.data):
                up = buf.upstream
                self.dedup_ok[h] = Upstream(up.first_page, up.n_pages, up.crc)
            else:
                self._queue(buf, "precopy")
        self._maybe_precopy_done()

    def record_dirty(self, handles) -> None:
        dev = self.proc.device
        for h in sorted(handles):
            if not self.proc._is_active(h):
                continue
            self.dirty.add(h)
            dev.get(h).reset_chunks()
            self.fresh.pop(h, None)
            self.dedup_ok.pop(h, None)
            tr = self._transfers.pop(h, None)
            if tr is not None:
                self.channel.cancel(tr)
            if self.retaining:
                self.dirty_bytes_after_retain += dev.get(h).size
        if not self.retaining and not self.precopy_over and \
                len(self.dirty) > self.cfg.dirty_threshold * len(dev.active()):
            self.crossing = set(handles) & self.dirty
            self._retain()
        self._maybe_precopy_done()

    def _retain(self) -> None:
        proc = self.proc
        self.retaining = True
        self.retain_dirty_count = len(self.dirty)
        # launched kernels still finish; their writes are the in-flight slack
        self.inflight = set()
        for nid in proc.running.values():
            self.inflight |= proc.dag.kernels[nid].spec.writes
        proc.dag.retained = True
        proc.hold("retain")
        proc.stall.begin("retain")
        proc.when_drained(self._retain_drained)

    def _retain_drained(self) -> None:
        if not self.active:
            return
        self.retain_drained = True
        self.recompute = recompute_plan(self.proc.dag)
        for h in sorted(self.dirty):
            if h not in self.recompute and h not in self.fresh and h not in self._transfers:
                self._queue(self.proc.device.get(h), "dirty")
        self._maybe_precopy_done()

    # -- CPU pre-copy ------------------------------------------------------------------

    def _host_pieces(self) -> list[list[int]]:
        per = max(1, self.channel.chunk_size // self.proc.host.page_size)
        pages = sorted(self.proc.host.pages)
        return [pages[i:i + per] for i in range(0, len(pages), per)]

    def _send_host_piece(self, pages: list[int]) -> None:
        host = self.proc.host
        gen = self._gen
        self.host_outstanding += 1

        def done():
            if gen != self._gen:
                return
            for idx in pages:
                self.host_captured[idx] = (host.pages[idx].tobytes(), host.version[idx])
            self.host_outstanding -= 1
            self._maybe_precopy_done()

        self.channel.submit(Transfer(len(pages) * host.page_size, Priority.CKPT, on_done=done,
                                     tag="host"))

    def _maybe_precopy_done(self) -> None:
        if not self.active or self.precopy_over or self._transfers or self.pending_checks:
            return
        if self.retaining and not self.retain_drained:
            return
        if self.gpu_phase_dirty is None:
            self.gpu_phase_dirty = len(self.dirty)
        if not self.host_started:
            self.host_started = True
            for piece in self._host_pieces():
                self._send_host_piece(piece)
        if self.host_outstanding:
            return
        self.precopy_over = True
        self._stop("final", self._final_drained)

    # -- hooks ------------------------------------------------------------------------------

    def on_complete(self, node: KernelNode, run: KernelRun) -> None:
        if not self.active:
            return
        self._recorded.add(node.id)
        writes = set(node.spec.writes)
        if node.call.kind is ApiKind.LAUNCH_OPAQUE:
            report = validate(node.id, node.spec, node.call.true_reads, node.call.true_writes,
                              Phase.CHECKPOINT)
            if not report.ok:
                self.metrics.validation_failures += 1
                writes |= report.missed
        if writes:
            self.record_dirty(writes)

    def pre_clear(self, nodes: list[KernelNode]) -> None:
        if not self.active:
            return
        late = [n for n in nodes if n.id not in self._recorded]
        self._recorded.update(n.id for n in late)
        writes = set().union(*(n.spec.writes for n in late)) if late else set()
        if writes:
            self.record_dirty(writes)

    def on_free(self, buf: GpuBuffer) -> None:
        h = buf.handle
        self.dirty.discard(h)
        self.fresh.pop(h, None)
        self.dedup_ok.pop(h, None)
        self.pending_checks.discard(h)
        tr = self._transfers.pop(h, None)
        if tr is not None:
            self.channel.cancel(tr)

    def instrumented(self, node: KernelNode) -> bool:
        return self.active and not self.precopy_over and node.call.kind is ApiKind.LAUNCH_OPAQUE

    # -- final stop -------------------------------------------------------------------------

    def _final_drained(self) -> None:
        proc = self.proc
        self.active = False
        t_stop = proc.clock.now
        self.final_bytes = 0
        dag = proc.dag.pending_copy()
        recompute = recompute_plan(dag)
        records = []
        final_sizes = []
        m = self.metrics
        n_active = 0
        for buf in proc.device.active():
            n_active += 1
            h = buf.handle
            up = self.dedup_ok.get(h)
            if up is not None and buf.upstream is not None and buf.upstream.crc == up.crc \
                    and self.dedup_holds(buf, up, buf.data):
                records.append(GpuRecord(h, RecordKind.DEDUP_REF, first_page=up.first_page,
                                         n_pages=up.n_pages, crc=up.crc))
                m.bytes_dedup_saved += buf.size
            elif h in self.fresh:
                records.append(GpuRecord(h, RecordKind.INLINE, data=self.captured[h].tobytes()))
                if self.fresh[h] == "precopy":
                    m.bytes_precopy += buf.size
                else:
                    m.bytes_dirty += buf.size
            elif h in recompute:
                records.append(GpuRecord(h, RecordKind.RECOMPUTE, node_ids=recompute[h]))
                m.bytes_dedup_saved += buf.size
            else:
                records.append(GpuRecord(h, RecordKind.INLINE, data=buf.data.tobytes()))
                m.bytes_dirty += buf.size
                final_sizes.append(buf.size)
        self.gpu_dirty_bytes = m.bytes_dirty
        self.recompute = {h: v for h, v in recompute.items()
                          if any(r.handle == h and r.kind is RecordKind.RECOMPUTE for r in records)}
        host = {}
        host_final = 0
        changed = 0
        for idx in sorted(proc.host.pages):
            cap = self.host_captured.get(idx)
            if cap is not None and cap[1] == proc.host.version[idx]:
                host[idx] = cap[0]
                m.bytes_precopy += len(cap[0])
            else:
                host[idx] = proc.host.pages[idx].tobytes()
                host_final += len(host[idx])
                m.bytes_dirty += len(host[idx])
                changed += 1
        self.gpu_dirty_fraction = len(self.dirty) / max(1, n_active)
        self.cpu_dirty_fraction = changed / max(1, len(proc.host.pages))
        dag_data = dag.serialize()
        self.dag_bytes = len(dag_data)
        meta = self._meta()
        image = self._image(records, host, dag, meta)

        def shipped():
            m.downtime_ns = proc.clock.now - t_stop
            self._finish(image)

        self._send_all(final_sizes + [host_final, len(dag_data)], shipped)


def recompute_plan(dag: KernelDag) -> dict[int, tuple[int, ...]]:
    """Buffers that pending kernels fully regenerate before anything reads them.

    Only exact-dataflow kernels qualify, and only when no pending kernel is
    opaque (a hidden read could observe the stale contents).
    """
    pending = [n for n in dag.kernel_order() if n.state is NodeState.PENDING]
    if any(n.call.kind is ApiKind.LAUNCH_OPAQUE for n in pending):
        return {}
    first: dict[int, KernelNode] = {}
    for n in pending:
        for h in n.spec.touched:
            first.setdefault(h, n)
    return {h: (n.id,) for h, n in sorted(first.items())
            if n.call.kind is ApiKind.LAUNCH_KNOWN and h in n.spec.writes and h not in n.spec.reads}
