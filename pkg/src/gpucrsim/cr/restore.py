"""Restore protocols: full (load everything first) and soft on-demand load."""

from __future__ import annotations

import numpy as np

from gpucrsim.api import ApiCall, ApiKind
from gpucrsim.config import transfer_ns
from gpucrsim.cr.metrics import MetricsReport
from gpucrsim.cr.pool import ContextPool
from gpucrsim.dag import KernelDag, KernelNode, NodeState
from gpucrsim.errors import BadState
from gpucrsim.image import CheckpointImage, RecordKind
from gpucrsim.process import GpuProcess, KernelRun, Session
from gpucrsim.sim import effects
from gpucrsim.sim.engines import Priority, Transfer
from gpucrsim.sim.memory import ChunkState
from gpucrsim.speculation import Phase, validate


class RestoreSession(Session):
    def __init__(self, proc: GpuProcess, image: CheckpointImage, mode: str = "ondemand",
                 pool: ContextPool | None = None, image_bytes: int = 0):
        if mode not in ("ondemand", "full"):
            raise ValueError(f"unknown restore mode {mode!r}")
        self.proc = proc
        self.image = image
        self.mode = mode
        self.pool = pool if pool is not None else ContextPool(proc.cfg.context_pool_size,
                                                              proc.cfg.context_creation_ns)
        self.metrics = MetricsReport(f"restore-{mode}", image_bytes=image_bytes)
        self.unloaded: set[int] = set()
        self.content: dict[int, bytes | None] = {}
        self.dag_ids: set[int] = set()
        self.dag_remaining: set[int] = set()
        self.has_recompute = False
        self.exec_log: list[ApiCall] = []
        self.starts: list[tuple[int, int, bool]] = []
        self.fallbacks = 0
        self.active = False
        self.done = False
        self.context = None
        self.latency = 0
        self._transfers: dict[int, Transfer] = {}
        self._released = False

    # -- setup ----------------------------------------------------------------------------

    def begin(self) -> None:
        proc = self.proc
        self.context, self.latency = self.pool.acquire()
        self._install()
        proc.session = self
        self.active = True
        proc.hold("restore")
        proc.pause("restore")
        proc.stall.begin("restore")
        proc.start(self.image.cursor + 1)
        proc.clock.after(self.latency, self._context_ready)

    def _install(self) -> None:
        proc, img = self.proc, self.image
        dev = proc.device
        for a in sorted(img.allocations, key=lambda a: a.handle):
            buf = dev.install(a.handle, a.base, a.size)
            buf.data[:] = effects.garbage(a.handle, a.size)
        dev.next_addr = max(dev.next_addr, img.next_addr)
        dev.next_handle = max(dev.next_handle, img.next_handle)
        for s in img.streams:
            proc.add_stream(s)
        for idx, data in img.host_pages.items():
            proc.host.install_page(idx, np.frombuffer(data, dtype=np.uint8))
        proc.host.hw_dirty.clear()
        for rec in img.gpu:
            buf = dev.get(rec.handle)
            if rec.kind is RecordKind.RECOMPUTE:
                self.has_recompute = True
                self.content[rec.handle] = None
                buf.chunks[:] = ChunkState.COPIED
            else:
                self.content[rec.handle] = img.buffer_bytes(rec.handle)
                buf.reset_chunks()
                self.unloaded.add(rec.handle)
        dag = KernelDag.deserialize(img.dag.serialize())
        for node in dag.kernels.values():
            node.state = NodeState.PENDING
        proc.dag = dag
        for nid in sorted(dag.kernels):
            s = dag.kernels[nid].stream
            if s not in proc.streams:
                proc.add_stream(s)
            proc.queues[s].append(nid)
        self.dag_ids = set(dag.kernels)
        self.dag_remaining = set(dag.kernels)

    def _context_ready(self) -> None:
        proc = self.proc
        handles = [a.handle for a in self.image.allocations]
        for h in proc.dag.topo_order_buffers(handles):
            if h in self.unloaded:
                self._load(h)
        if self.mode == "ondemand":
            self._release()
            proc.unpause("restore")
        self._check()

    def _release(self) -> None:
        if not self._released:
            self._released = True
            # time the application could not issue work
            self.metrics.downtime_ns = self.proc.clock.now
            self.proc.stall.end("restore")
            self.proc.release("restore")

    def _load(self, h: int) -> None:
        buf = self.proc.device.get(h)
        data = np.frombuffer(self.content[h], dtype=np.uint8)
        cs = buf.chunk_size

        def chunk(off, n):
            buf.data[off:off + n] = data[off:off + n]
            buf.chunks[off // cs] = ChunkState.COPIED
            if off + n >= buf.size:
                self._transfers.pop(h, None)
                self.unloaded.discard(h)
                self.proc.kick_all()
                self._check()

        tr = Transfer(buf.size, Priority.CKPT, on_chunk=chunk, tag=("load", h))
        self._transfers[h] = tr
        self.proc.pcie.submit(tr)

    def _check(self) -> None:
        proc = self.proc
        if self.done:
            return
        if self.mode == "full" and not self.unloaded and proc.clock.now >= self.latency:
            self._release()
            if not self.dag_remaining:
                proc.unpause("restore")
        if not self.unloaded and not self.dag_remaining and self._released:
            self.done = True
            self.active = False
            proc.session = None
            for reason in [r for r in proc.stall.active if isinstance(r, tuple)]:
                proc.stall.end(reason)
            proc.unpause("restore")
            self.metrics.stall_ns = proc.stall.value
            proc.kick_all()

    # -- hooks ----------------------------------------------------------------------------

    def gate(self, node: KernelNode) -> bool:
        proc = self.proc
        key = ("load", node.id)
        if self.has_recompute and node.id not in self.dag_ids and self.dag_remaining:
            proc.stall.begin(key)
            return False
        missing = [h for h in sorted(node.spec.touched) if h in self.unloaded]
        if not missing:
            proc.stall.end(key)
            return True
        for h in missing:
            tr = self._transfers.get(h)
            if tr is not None:
                proc.pcie.promote(tr, Priority.APP)
        proc.stall.begin(key)
        return False

    def instrumented(self, node: KernelNode) -> bool:
        return self.active and node.call.kind is ApiKind.LAUNCH_OPAQUE

    def on_start(self, node: KernelNode, run: KernelRun) -> None:
        touched = set(node.call.true_reads) | set(node.call.true_writes)
        run.inputs_loaded = not (touched & self.unloaded)
        self.starts.append((node.id, run.start, run.inputs_loaded))
        if self.metrics.restore_first_kernel_ns is None:
            self.metrics.restore_first_kernel_ns = run.start

    def on_complete(self, node: KernelNode, run: KernelRun) -> None:
        self.exec_log.append(node.call)
        self.dag_remaining.discard(node.id)
        if node.call.kind is ApiKind.LAUNCH_OPAQUE:
            report = validate(node.id, node.spec, node.call.true_reads, node.call.true_writes,
                              Phase.RESTORE)
            if not report.ok:
                self.metrics.validation_failures += 1
        if not run.inputs_loaded:
            self.fallback(node)
        self._check()

    # -- fallback -----------------------------------------------------------------------------

    def fallback(self, node: KernelNode) -> None:
        """Roll back every logged kernel connected to the bad one through shared
        buffers, reload those buffers from the image, and re-execute in order."""
        proc = self.proc
        dev = proc.device
        touched = [set(c.true_reads) | set(c.true_writes) for c in self.exec_log]
        region = set(node.call.true_reads) | set(node.call.true_writes)
        chosen: set[int] = set()
        grew = True
        while grew:
            grew = False
            for i, t in enumerate(touched):
                if i not in chosen and t & region:
                    chosen.add(i)
                    region |= t
                    grew = True
        reload_bytes = 0
        for h in sorted(region):
            if not proc._is_active(h):
                raise BadState(f"fallback needs freed buffer {h}")
            buf = dev.get(h)
            if h in self.content:
                data = self.content[h]
                buf.data[:] = (effects.garbage(h, buf.size) if data is None
                               else np.frombuffer(data, dtype=np.uint8))
                reload_bytes += buf.size
            else:
                buf.data[:] = 0
            if h in self.unloaded:
                tr = self._transfers.pop(h, None)
                if tr is not None:
                    proc.pcie.cancel(tr)
                self.unloaded.discard(h)
            buf.chunks[:] = ChunkState.COPIED
        replay_ns = 0
        for i in sorted(chosen):
            call = self.exec_log[i]
            effects.apply(call, dev, proc.host)
            replay_ns += call.duration_ns
        self.fallbacks += 1
        reason = ("fallback", self.fallbacks)
        proc.hold(reason)
        proc.stall.begin(reason)

        def resume():
            proc.stall.end(reason)
            proc.release(reason)

        proc.clock.after(transfer_ns(reload_bytes, proc.cfg.pcie_bw) + replay_ns, resume)
