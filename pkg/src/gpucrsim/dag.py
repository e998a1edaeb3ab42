"""Runtime kernel DAG.

Kernels and buffers are both nodes. Edges run buffer->kernel for reads,
kernel->buffer for writes, and kernel->kernel for stream FIFO order. Kernel
ids grow with insertion, and every derived kernel dependency points from an
older kernel to a newer one, so the kernel-level graph is acyclic by
construction (still checked in debug mode).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

from gpucrsim.api import ApiCall, ApiKind
from gpucrsim.errors import BadState, CorruptDag, FreedBuffer, PendingKernels
from gpucrsim.speculation import AccessSpec, Confidence

MAGIC = b"KDAG"
VERSION = 1
_API_KINDS = list(ApiKind)


class NodeState(enum.IntEnum):
    PENDING = 0
    RUNNING = 1
    DONE = 2


class EdgeKind(enum.IntEnum):
    READ = 0
    WRITE = 1
    FIFO = 2


@dataclass(eq=False)
class KernelNode:
    id: int
    call: ApiCall
    spec: AccessSpec
    state: NodeState = NodeState.PENDING
    deps: set[int] = field(default_factory=set)

    @property
    def stream(self) -> int:
        return self.call.stream or 0


class KernelDag:
    def __init__(self, debug: bool = False):
        self.kernels: dict[int, KernelNode] = {}
        self.buffer_nodes: dict[int, int] = {}       # handle -> node id
        self._out: dict[int, set[tuple[int, EdgeKind]]] = {}
        self._in: dict[int, set[tuple[int, EdgeKind]]] = {}
        self.stream_tails: dict[int, int] = {}
        self.retained = False       # "record, don't launch" mode
        self.keep_done = False      # defer GC of Done nodes (during C/R)
        self.debug = debug
        self._next_id = 1
        self._last_writer: dict[int, int] = {}
        self._readers: dict[int, set[int]] = {}

    def __len__(self):
        return len(self.kernels) + len(self.buffer_nodes)

    @property
    def edges(self) -> set[tuple[int, int, EdgeKind]]:
        return {(a, b, k) for a, outs in self._out.items() for b, k in outs}

    @edges.setter
    def edges(self, edges) -> None:
        self._out, self._in = {}, {}
        for a, b, k in edges:
            self._add_edge(a, b, k)

    def _add_edge(self, a: int, b: int, kind: EdgeKind) -> None:
        self._out.setdefault(a, set()).add((b, kind))
        self._in.setdefault(b, set()).add((a, kind))

    # -- construction -----------------------------------------------------

    def _alloc_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _buffer_node(self, handle: int) -> int:
        nid = self.buffer_nodes.get(handle)
        if nid is None:
            nid = self._alloc_id()
            self.buffer_nodes[handle] = nid
        return nid

    def _link(self, node: KernelNode) -> None:
        spec = node.spec
        tail = self.stream_tails.get(node.stream)
        if tail is not None and tail in self.kernels:
            self._add_edge(tail, node.id, EdgeKind.FIFO)
            node.deps.add(tail)
        for h in spec.reads:
            self._add_edge(self._buffer_node(h), node.id, EdgeKind.READ)
        for h in spec.writes:
            self._add_edge(node.id, self._buffer_node(h), EdgeKind.WRITE)
        for h in spec.touched:
            w = self._last_writer.get(h)
            if w is not None and w in self.kernels:
                node.deps.add(w)
        for h in spec.writes:
            node.deps.update(r for r in self._readers.get(h, ()) if r in self.kernels)
        node.deps.discard(node.id)
        for h in spec.reads:
            self._readers.setdefault(h, set()).add(node.id)
        for h in spec.writes:
            self._last_writer[h] = node.id
            self._readers[h] = set()
        self.stream_tails[node.stream] = node.id

    def add_kernel(self, call: ApiCall, spec: AccessSpec,
                   is_active: Callable[[int], bool] | None = None) -> int:
        if is_active is not None:
            for h in spec.touched:
                if not is_active(h):
                    raise FreedBuffer(f"kernel seq {call.seq} references freed buffer {h}")
        node = KernelNode(self._alloc_id(), call, spec)
        self.kernels[node.id] = node
        self._link(node)
        if self.debug:
            self.check_acyclic()
        return node.id

    # -- state transitions ----------------------------------------------------

    def mark_running(self, nid: int) -> None:
        node = self.kernels[nid]
        if node.state is not NodeState.PENDING:
            raise BadState(f"node {nid} is {node.state.name}, expected PENDING")
        node.state = NodeState.RUNNING

    def ready(self, nid: int) -> bool:
        """All predecessors finished (or already collected)."""
        for d in self.kernels[nid].deps:
            dep = self.kernels.get(d)
            if dep is not None and dep.state is not NodeState.DONE:
                return False
        return True

    def on_kernel_complete(self, nid: int) -> frozenset[int]:
        node = self.kernels.get(nid)
        if node is None or node.state is not NodeState.RUNNING:
            raise BadState(f"node {nid} is not RUNNING")
        node.state = NodeState.DONE
        writes = node.spec.writes
        if not self.keep_done:
            self._remove([nid])
        return writes

    def pending(self) -> list[KernelNode]:
        return [n for n in self.kernels.values() if n.state is NodeState.PENDING]

    def done(self) -> list[KernelNode]:
        return [n for n in self.kernels.values() if n.state is NodeState.DONE]

    def collect_done(self) -> None:
        self._remove([n.id for n in self.done()])

    def _remove(self, ids: Iterable[int]) -> None:
        ids = set(ids)
        if not ids:
            return
        touched_buffers = set()
        for nid in ids:
            node = self.kernels.pop(nid)
            for b, k in self._out.pop(nid, ()):
                self._in[b].discard((nid, k))
            for a, k in self._in.pop(nid, ()):
                self._out[a].discard((nid, k))
            touched_buffers |= node.spec.touched
            if self.stream_tails.get(node.stream) == nid:
                del self.stream_tails[node.stream]
        for h in touched_buffers:
            bnid = self.buffer_nodes.get(h)
            if bnid is not None and not self._out.get(bnid) and not self._in.get(bnid):
                del self.buffer_nodes[h]
                self._out.pop(bnid, None)
                self._in.pop(bnid, None)
                self._last_writer.pop(h, None)
                self._readers.pop(h, None)

    def clear(self, scope: str = "device", stream: int | None = None,
              pre_clear: Callable[[list[KernelNode]], None] | None = None) -> None:
        if scope == "device":
            scoped = list(self.kernels.values())
        else:
            scoped = [n for n in self.kernels.values() if n.stream == stream]
        if any(n.state is not NodeState.DONE for n in scoped):
            raise PendingKernels(f"{scope} clear with unfinished kernels")
        if pre_clear is not None:
            pre_clear(scoped)
        self._remove([n.id for n in scoped])

    def references(self, handle: int) -> bool:
        """Whether a not-yet-finished kernel touches the buffer."""
        return any(handle in n.spec.touched for n in self.kernels.values()
                   if n.state is not NodeState.DONE)

    # -- passes -----------------------------------------------------------------

    def kernel_order(self) -> list[KernelNode]:
        """Pending+running kernels in a DAG-respecting order (stable by id)."""
        return [self.kernels[i] for i in sorted(self.kernels)
                if self.kernels[i].state is not NodeState.DONE]

    def topo_order_buffers(self, all_handles: Iterable[int] = ()) -> list[int]:
        """Buffers of pending kernels, each kernel's inputs before the buffers
        it first writes; unreferenced buffers follow in handle order."""
        order: list[int] = []
        seen: set[int] = set()
        for node in self.kernel_order():
            if node.state is not NodeState.PENDING:
                continue
            for h in sorted(node.spec.reads):
                if h not in seen:
                    seen.add(h)
                    order.append(h)
            for h in sorted(node.spec.writes):
                if h not in seen:
                    seen.add(h)
                    order.append(h)
        order.extend(sorted(h for h in set(all_handles) if h not in seen))
        return order

    def check_acyclic(self) -> None:
        state: dict[int, int] = {}
        for start in self.kernels:
            if start in state:
                continue
            stack = [(start, iter(self.kernels[start].deps))]
            state[start] = 1
            while stack:
                nid, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[nid] = 2
                    stack.pop()
                    continue
                if nxt not in self.kernels:
                    continue
                s = state.get(nxt)
                if s == 1:
                    raise BadState(f"cycle through kernel node {nxt}")
                if s is None:
                    state[nxt] = 1
                    stack.append((nxt, iter(self.kernels[nxt].deps)))

    def pending_copy(self) -> "KernelDag":
        """A new DAG holding only unlaunched kernels, node ids preserved."""
        out = KernelDag()
        keep = [n for n in self.kernel_order() if n.state is NodeState.PENDING]
        for node in keep:
            out.kernels[node.id] = KernelNode(node.id, node.call, node.spec)
            for h in node.spec.touched:
                out.buffer_nodes[h] = self.buffer_nodes[h]
        out._next_id = self._next_id
        for node in keep:
            out._link(out.kernels[node.id])
        return out

    # -- wire format ------------------------------------------------------------

    def key(self) -> tuple:
        """Structural identity used for round-trip comparison."""
        kern = tuple(
            (n.id, int(n.state), n.call.kind.value, n.stream, n.call.seq,
             n.call.kernel_name, tuple(n.call.args), n.call.bytes, n.call.duration_ns,
             tuple(sorted(n.spec.reads)), tuple(sorted(n.spec.writes)), n.spec.confidence.value,
             tuple(n.call.true_reads), tuple(n.call.true_writes))
            for n in (self.kernels[i] for i in sorted(self.kernels)))
        bufs = tuple(sorted((nid, h) for h, nid in self.buffer_nodes.items()))
        return kern, bufs, tuple(sorted((a, b, int(k)) for a, b, k in self.edges))

    def __eq__(self, other):
        return isinstance(other, KernelDag) and self.key() == other.key()

    def serialize(self) -> bytes:
        nodes: list[bytes] = []
        for nid in sorted(self.kernels):
            nodes.append(_pack_kernel(self.kernels[nid]))
        for h, nid in sorted(self.buffer_nodes.items(), key=lambda kv: kv[1]):
            nodes.append(struct.pack("<BII", 1, nid, h))
        out = [MAGIC, struct.pack("<II", VERSION, len(nodes))]
        for rec in nodes:
            out.append(struct.pack("<I", len(rec)))
            out.append(rec)
        edges = sorted(self.edges)
        out.append(struct.pack("<I", len(edges)))
        for a, b, k in edges:
            out.append(struct.pack("<IIB", a, b, int(k)))
        return b"".join(out)

    @classmethod
    def deserialize(cls, data: bytes) -> "KernelDag":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CorruptDag("bad magic")
        version, count = r.unpack("<II")
        if version != VERSION:
            raise CorruptDag(f"unsupported version {version}")
        dag = cls()
        max_id = 0
        for _ in range(count):
            (length,) = r.unpack("<I")
            rec = _Reader(r.take(length))
            (kind,) = rec.unpack("<B")
            if kind == 0:
                node = _unpack_kernel(rec)
                if node.id in dag.kernels:
                    raise CorruptDag(f"duplicate node {node.id}")
                dag.kernels[node.id] = node
                max_id = max(max_id, node.id)
            elif kind == 1:
                nid, h = rec.unpack("<II")
                dag.buffer_nodes[h] = nid
                max_id = max(max_id, nid)
            else:
                raise CorruptDag(f"unknown node kind {kind}")
            if rec.remaining():
                raise CorruptDag("node record has trailing bytes")
        (n_edges,) = r.unpack("<I")
        edges = set()
        known = set(dag.kernels) | set(dag.buffer_nodes.values())
        for _ in range(n_edges):
            a, b, k = r.unpack("<IIB")
            if a not in known or b not in known or k > 2:
                raise CorruptDag("dangling or malformed edge")
            edges.add((a, b, EdgeKind(k)))
        if r.remaining():
            raise CorruptDag("trailing bytes after edge list")
        for node in (dag.kernels[i] for i in sorted(dag.kernels)):
            for h in node.spec.touched:
                if h not in dag.buffer_nodes:
                    raise CorruptDag(f"kernel {node.id} references missing buffer node {h}")
            dag._link(node)
        dag.edges = edges
        dag._next_id = max_id + 1
        return dag


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptDag(f"truncated at {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _pack_handles(hs) -> bytes:
    hs = sorted(hs)
    return struct.pack(f"<H{len(hs)}I", len(hs), *hs)


def _pack_kernel(n: KernelNode) -> bytes:
    c = n.call
    name = (c.kernel_name or "").encode()
    parts = [
        struct.pack("<BIBBiIQQ", 0, n.id, int(n.state), _API_KINDS.index(c.kind),
                    n.stream, c.seq, c.duration_ns, c.bytes),
        struct.pack("<H", len(name)), name,
        struct.pack("<H", len(c.args)),
    ]
    parts += [struct.pack("<QB", v, s) for v, s in c.args]
    parts += [
        _pack_handles(n.spec.reads), _pack_handles(n.spec.writes),
        struct.pack("<B", 0 if n.spec.confidence is Confidence.EXACT else 1),
        struct.pack(f"<H{len(c.true_reads)}I", len(c.true_reads), *c.true_reads),
        struct.pack(f"<H{len(c.true_writes)}I", len(c.true_writes), *c.true_writes),
    ]
    return b"".join(parts)


def _unpack_handles(r: _Reader) -> list[int]:
    (n,) = r.unpack("<H")
    return list(r.unpack(f"<{n}I"))


def _unpack_kernel(r: _Reader) -> KernelNode:
    nid, state, kind_idx, stream, seq, duration, nbytes = r.unpack("<IBBiIQQ")
    if kind_idx >= len(_API_KINDS) or state > 2:
        raise CorruptDag("bad kernel header")
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode(errors="replace") or None
    (nargs,) = r.unpack("<H")
    args = [r.unpack("<QB") for _ in range(nargs)]
    reads = _unpack_handles(r)
    writes = _unpack_handles(r)
    (conf,) = r.unpack("<B")
    if conf > 1:
        raise CorruptDag("bad confidence")
    true_reads = _unpack_handles(r)
    true_writes = _unpack_handles(r)
    call = ApiCall(seq=seq, kind=_API_KINDS[kind_idx], stream=stream, kernel_name=name,
                   args=[(int(v), int(s)) for v, s in args], bytes=nbytes,
                   duration_ns=duration, true_reads=true_reads, true_writes=true_writes)
    spec = AccessSpec(frozenset(reads), frozenset(writes),
                      Confidence.EXACT if conf == 0 else Confidence.SPECULATED)
    return KernelNode(nid, call, spec, NodeState(state))
