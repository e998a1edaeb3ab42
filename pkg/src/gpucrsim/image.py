"""Checkpoint image model and its binary encoding.

Layout (little-endian)::

    header   32 B   magic "POSI", u16 version, u16 flags,
                    u32 host_len, u32 gpu_len, u32 dag_len, u32 meta_len,
                    i64 cursor
    host     host_len B   records: u64 page index, u32 n, n bytes
    gpu      gpu_len B    records: u32 handle, u8 kind, then
                            Inline    u64 n, n bytes
                            DedupRef  u64 first page, u32 n pages, u32 crc32
                            Recompute u32 n, n x u32 node id
    dag      dag_len B    kernel DAG wire format
    meta     meta_len B   u64 next_addr, u32 next_handle, u32 n_streams,
                          n_streams x i32, then allocation records
                          (u32 handle, u64 base, u64 size) to section end
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field

from gpucrsim.config import DEVICE_ADDR_BASE
from gpucrsim.dag import KernelDag
from gpucrsim.errors import CorruptDag, CorruptImage, InvariantViolation

MAGIC = b"POSI"
VERSION = 1
HEADER = struct.Struct("<4sHHIIIIq")
FLAG_DEDUP = 0x1
KNOWN_FLAGS = FLAG_DEDUP


class RecordKind(enum.IntEnum):
    INLINE = 0
    DEDUP_REF = 1
    RECOMPUTE = 2


@dataclass
class GpuRecord:
    handle: int
    kind: RecordKind
    data: bytes = b""
    first_page: int = 0
    n_pages: int = 0
    crc: int = 0
    node_ids: tuple[int, ...] = ()

    def encoded_size(self) -> int:
        if self.kind is RecordKind.INLINE:
            return 5 + 8 + len(self.data)
        if self.kind is RecordKind.DEDUP_REF:
            return 5 + 16
        return 5 + 4 + 4 * len(self.node_ids)


@dataclass(frozen=True)
class Allocation:
    handle: int
    base: int
    size: int


@dataclass
class CheckpointImage:
    host_pages: dict[int, bytes] = field(default_factory=dict)
    gpu: list[GpuRecord] = field(default_factory=list)
    dag: KernelDag = field(default_factory=KernelDag)
    allocations: list[Allocation] = field(default_factory=list)
    streams: list[int] = field(default_factory=list)
    next_addr: int = DEVICE_ADDR_BASE
    next_handle: int = 1
    cursor: int = -1
    flags: int = 0

    def record(self, handle: int) -> GpuRecord:
        for r in self.gpu:
            if r.handle == handle:
                return r
        raise KeyError(handle)

    def allocation(self, handle: int) -> Allocation:
        for a in self.allocations:
            if a.handle == handle:
                return a
        raise KeyError(handle)

    def dedup_bytes(self, rec: GpuRecord, size: int) -> bytes:
        pages = [self.host_pages[p] for p in range(rec.first_page, rec.first_page + rec.n_pages)]
        return b"".join(pages)[:size]

    def buffer_bytes(self, handle: int) -> bytes | None:
        """Checkpointed contents of a buffer; None for Recompute records."""
        rec = self.record(handle)
        if rec.kind is RecordKind.INLINE:
            return rec.data
        if rec.kind is RecordKind.DEDUP_REF:
            return self.dedup_bytes(rec, self.allocation(handle).size)
        return None

    # size accounting
    def inline_bytes(self) -> int:
        return sum(len(r.data) for r in self.gpu if r.kind is RecordKind.INLINE)

    def dedup_saved(self) -> int:
        sizes = {a.handle: a.size for a in self.allocations}
        return sum(sizes[r.handle] for r in self.gpu if r.kind is not RecordKind.INLINE)

    def __eq__(self, other):
        if not isinstance(other, CheckpointImage):
            return NotImplemented
        return (self.host_pages == other.host_pages and self.gpu == other.gpu
                and self.dag == other.dag and self.allocations == other.allocations
                and self.streams == other.streams and self.next_addr == other.next_addr
                and self.next_handle == other.next_handle and self.cursor == other.cursor
                and self.flags == other.flags)


def _problems(img: CheckpointImage) -> list[str]:
    out = []
    sizes = {}
    for a in img.allocations:
        if a.handle in sizes:
            out.append(f"duplicate allocation {a.handle}")
        sizes[a.handle] = a.size
    seen = set()
    kernel_ids = set(img.dag.kernels)
    for r in img.gpu:
        if r.handle in seen:
            out.append(f"duplicate record for buffer {r.handle}")
        seen.add(r.handle)
        if r.handle not in sizes:
            out.append(f"record for unallocated buffer {r.handle}")
            continue
        if r.kind is RecordKind.INLINE and len(r.data) != sizes[r.handle]:
            out.append(f"inline record {r.handle} has {len(r.data)} bytes, expected {sizes[r.handle]}")
        elif r.kind is RecordKind.DEDUP_REF:
            missing = next((p for p in range(r.first_page, r.first_page + r.n_pages)
                            if p not in img.host_pages), None)
            if missing is not None:
                out.append(f"dedup-ref {r.handle} points at missing host page {missing}")
            elif zlib.crc32(img.dedup_bytes(r, sizes[r.handle])) != r.crc:
                out.append(f"dedup-ref {r.handle} crc mismatch")
        elif r.kind is RecordKind.RECOMPUTE:
            dangling = [n for n in r.node_ids if n not in kernel_ids]
            if dangling or not r.node_ids:
                out.append(f"recompute record {r.handle} names missing dag node")
    if seen != set(sizes):
        out.append("allocations without a buffer record")
    for node in img.dag.kernels.values():
        for h in node.spec.touched:
            if h not in sizes:
                out.append(f"dag node {node.id} references unallocated buffer {h}")
    if img.flags & ~KNOWN_FLAGS:
        out.append(f"unknown flags {img.flags:#x}")
    return out


def validate(img: CheckpointImage) -> None:
    probs = _problems(img)
    if probs:
        raise InvariantViolation("; ".join(probs))


def write_image(img: CheckpointImage) -> bytes:
    validate(img)
    host = b"".join(struct.pack("<QI", idx, len(img.host_pages[idx])) + img.host_pages[idx]
                    for idx in sorted(img.host_pages))
    gpu_parts = []
    for r in sorted(img.gpu, key=lambda r: r.handle):
        head = struct.pack("<IB", r.handle, int(r.kind))
        if r.kind is RecordKind.INLINE:
            gpu_parts.append(head + struct.pack("<Q", len(r.data)) + r.data)
        elif r.kind is RecordKind.DEDUP_REF:
            gpu_parts.append(head + struct.pack("<QII", r.first_page, r.n_pages, r.crc))
        else:
            gpu_parts.append(head + struct.pack(f"<I{len(r.node_ids)}I", len(r.node_ids), *r.node_ids))
    gpu = b"".join(gpu_parts)
    dag = img.dag.serialize()
    streams = sorted(img.streams)
    meta = struct.pack(f"<QII{len(streams)}i", img.next_addr, img.next_handle, len(streams), *streams)
    meta += b"".join(struct.pack("<IQQ", a.handle, a.base, a.size)
                     for a in sorted(img.allocations, key=lambda a: a.handle))
    header = HEADER.pack(MAGIC, VERSION, img.flags, len(host), len(gpu), len(dag), len(meta), img.cursor)
    return header + host + gpu + dag + meta


def section_sizes(data: bytes) -> dict[str, int]:
    if len(data) < HEADER.size:
        raise CorruptImage(0, "truncated header")
    _, _, _, host, gpu, dag, meta, _ = HEADER.unpack_from(data)
    return {"header": HEADER.size, "host": host, "gpu": gpu, "dag": dag, "meta": meta}


class _Cursor:
    """Bounds-checked reader over one section; offsets are absolute."""

    def __init__(self, data: bytes, start: int, end: int):
        self.data = data
        self.pos = start
        self.end = end

    def unpack(self, fmt: str) -> tuple:
        n = struct.calcsize(fmt)
        if self.pos + n > self.end:
            raise CorruptImage(self.pos, "record runs past section end")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += n
        return out

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise CorruptImage(self.pos, "record runs past section end")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def more(self) -> bool:
        return self.pos < self.end


def read_image(data: bytes) -> CheckpointImage:
    data = bytes(data)
    if len(data) < HEADER.size:
        raise CorruptImage(0, "truncated header")
    magic, version, flags, host_len, gpu_len, dag_len, meta_len, cursor = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptImage(0, "bad magic")
    if version != VERSION:
        raise CorruptImage(4, f"unsupported version {version}")
    if flags & ~KNOWN_FLAGS:
        raise CorruptImage(6, f"unknown flags {flags:#x}")
    total = HEADER.size + host_len + gpu_len + dag_len + meta_len
    if total > len(data):
        raise CorruptImage(len(data), "truncated section")
    if total < len(data):
        raise CorruptImage(total, "trailing bytes")
    img = CheckpointImage(flags=flags, cursor=cursor)

    pos = HEADER.size
    c = _Cursor(data, pos, pos + host_len)
    while c.more():
        at = c.pos
        idx, n = c.unpack("<QI")
        if idx in img.host_pages:
            raise CorruptImage(at, f"duplicate host page {idx}")
        img.host_pages[idx] = c.take(n)
    pos += host_len

    c = _Cursor(data, pos, pos + gpu_len)
    rec_at = {}
    while c.more():
        at = c.pos
        handle, kind = c.unpack("<IB")
        if kind == RecordKind.INLINE:
            (n,) = c.unpack("<Q")
            rec = GpuRecord(handle, RecordKind.INLINE, data=c.take(n))
        elif kind == RecordKind.DEDUP_REF:
            first, npages, crc = c.unpack("<QII")
            rec = GpuRecord(handle, RecordKind.DEDUP_REF, first_page=first, n_pages=npages, crc=crc)
        elif kind == RecordKind.RECOMPUTE:
            (n,) = c.unpack("<I")
            rec = GpuRecord(handle, RecordKind.RECOMPUTE, node_ids=c.unpack(f"<{n}I"))
        else:
            raise CorruptImage(at + 4, f"unknown record kind {kind}")
        if handle in rec_at:
            raise CorruptImage(at, f"duplicate record for buffer {handle}")
        rec_at[handle] = at
        img.gpu.append(rec)
    pos += gpu_len

    try:
        img.dag = KernelDag.deserialize(data[pos:pos + dag_len])
    except CorruptDag as exc:
        raise CorruptImage(pos, f"dag: {exc}") from None
    except (ValueError, UnicodeDecodeError, OverflowError) as exc:
        raise CorruptImage(pos, f"dag: {exc}") from None
    pos += dag_len

    c = _Cursor(data, pos, pos + meta_len)
    img.next_addr, img.next_handle, n_streams = c.unpack("<QII")
    img.streams = sorted(c.unpack(f"<{n_streams}i"))
    while c.more():
        at = c.pos
        h, base, size = c.unpack("<IQQ")
        if size == 0 or base < DEVICE_ADDR_BASE:
            raise CorruptImage(at, f"bad allocation record for buffer {h}")
        img.allocations.append(Allocation(h, base, size))

    sizes = {}
    for a in img.allocations:
        if a.handle in sizes:
            raise CorruptImage(pos, f"duplicate allocation {a.handle}")
        sizes[a.handle] = a.size
    for r in img.gpu:
        at = rec_at[r.handle]
        if r.handle not in sizes:
            raise CorruptImage(at, f"record for unallocated buffer {r.handle}")
        if r.kind is RecordKind.INLINE and len(r.data) != sizes[r.handle]:
            raise CorruptImage(at, "inline length does not match allocation")
        if r.kind is RecordKind.DEDUP_REF:
            if any(p not in img.host_pages for p in range(r.first_page, r.first_page + r.n_pages)):
                raise CorruptImage(at, "dedup-ref points at missing host page")
            if zlib.crc32(img.dedup_bytes(r, sizes[r.handle])) != r.crc:
                raise CorruptImage(at, "dedup-ref crc mismatch")
        if r.kind is RecordKind.RECOMPUTE:
            if not r.node_ids or any(n not in img.dag.kernels for n in r.node_ids):
                raise CorruptImage(at, "recompute record names missing dag node")
    probs = _problems(img)
    if probs:
        raise CorruptImage(pos, probs[0])
    return img
