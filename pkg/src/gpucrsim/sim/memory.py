"""Device buffers, the bump allocator, and host memory with dirty bits."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field

import numpy as np

from gpucrsim.config import DEVICE_ADDR_BASE
from gpucrsim.errors import InvalidLocator, OutOfDeviceMemory

ALIGN = 256


class ChunkState(enum.IntEnum):
    NOT_COPIED = 0
    COPYING = 1
    COPIED = 2


class BufferStatus(enum.Enum):
    ACTIVE = "active"
    FREED = "freed"


@dataclass
class Upstream:
    """Host provenance of the last whole-buffer H2D copy."""

    first_page: int
    n_pages: int
    crc: int


@dataclass(eq=False)
class GpuBuffer:
    handle: int
    base: int
    size: int
    chunk_size: int
    data: np.ndarray = field(repr=False)
    chunks: np.ndarray = field(repr=False)
    dirty: bool = False
    cow_staged: np.ndarray | None = field(default=None, repr=False)
    upstream: Upstream | None = None
    status: BufferStatus = BufferStatus.ACTIVE

    @property
    def end(self) -> int:
        return self.base + self.size

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    def chunk_span(self, i: int) -> tuple[int, int]:
        lo = i * self.chunk_size
        return lo, min(self.size, lo + self.chunk_size)

    def reset_chunks(self) -> None:
        self.chunks[:] = ChunkState.NOT_COPIED

    def fully_copied(self) -> bool:
        return bool((self.chunks == ChunkState.COPIED).all())

    def remaining_bytes(self) -> int:
        left = 0
        for i in np.nonzero(self.chunks != ChunkState.COPIED)[0]:
            lo, hi = self.chunk_span(int(i))
            left += hi - lo
        return left


def n_chunks_for(size: int, chunk_size: int) -> int:
    return max(1, -(-size // chunk_size))


class Device:
    """One virtual GPU's memory: bump allocation upward from DEVICE_ADDR_BASE,
    no address reuse within a run."""

    def __init__(self, capacity: int, chunk_size: int):
        self.capacity = capacity
        self.chunk_size = chunk_size
        self.next_addr = DEVICE_ADDR_BASE
        self.next_handle = 1
        self.used = 0
        self.buffers: dict[int, GpuBuffer] = {}
        self._bases: list[int] = []
        self._by_base: list[GpuBuffer] = []

    def _make(self, handle: int, base: int, size: int) -> GpuBuffer:
        buf = GpuBuffer(
            handle=handle, base=base, size=size, chunk_size=self.chunk_size,
            data=np.zeros(size, dtype=np.uint8),
            chunks=np.zeros(n_chunks_for(size, self.chunk_size), dtype=np.int8),
        )
        self.buffers[handle] = buf
        i = bisect.bisect_left(self._bases, base)
        self._bases.insert(i, base)
        self._by_base.insert(i, buf)
        self.used += size
        return buf

    def alloc(self, size: int) -> GpuBuffer:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        if self.used + size > self.capacity:
            raise OutOfDeviceMemory(f"{size} bytes requested, {self.capacity - self.used} free")
        base = self.next_addr
        self.next_addr = base + -(-size // ALIGN) * ALIGN
        handle = self.next_handle
        self.next_handle += 1
        return self._make(handle, base, size)

    def install(self, handle: int, base: int, size: int) -> GpuBuffer:
        """Recreate an allocation at a recorded address (restore path)."""
        if base < DEVICE_ADDR_BASE:
            raise InvalidLocator(f"device base {base:#x} below device range")
        if self.lookup(base) is not None or self.lookup(base + size - 1) is not None:
            raise InvalidLocator(f"buffer {handle} overlaps an active allocation")
        if self.used + size > self.capacity:
            raise OutOfDeviceMemory(f"{size} bytes requested")
        return self._make(handle, base, size)

    def free(self, handle: int) -> GpuBuffer:
        buf = self.buffers.get(handle)
        if buf is None or buf.status is BufferStatus.FREED:
            raise InvalidLocator(f"free of unknown buffer {handle}")
        buf.status = BufferStatus.FREED
        i = bisect.bisect_left(self._bases, buf.base)
        del self._bases[i]
        del self._by_base[i]
        self.used -= buf.size
        buf.data = np.zeros(0, dtype=np.uint8)
        return buf

    def lookup(self, addr: int) -> GpuBuffer | None:
        """Active buffer whose [base, base+size) contains ``addr``."""
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        buf = self._by_base[i]
        return buf if addr < buf.end else None

    def active(self) -> list[GpuBuffer]:
        return sorted(self._by_base, key=lambda b: b.handle)

    def get(self, handle: int) -> GpuBuffer:
        buf = self.buffers.get(handle)
        if buf is None:
            raise InvalidLocator(f"unknown buffer handle {handle}")
        return buf


def initial_page(index: int, page_size: int) -> np.ndarray:
    """Deterministic content of a host page that was never written."""
    x = np.arange(page_size, dtype=np.uint64) + np.uint64(index) * np.uint64(page_size)
    x = (x * np.uint64(2654435761) + np.uint64(index * 40503 + 7)) >> np.uint64(13)
    return (x & np.uint64(0xFF)).astype(np.uint8)


class HostMemory:
    """Host pages addressed below DEVICE_ADDR_BASE.

    ``hw_dirty`` mimics the MMU dirty bit: set by every write, cleared only
    by ``clear_dirty``. ``version`` counts writes per page and is used by the
    incremental CPU checkpoint, which must not disturb the dirty bits.
    """

    def __init__(self, page_size: int):
        self.page_size = page_size
        self.pages: dict[int, np.ndarray] = {}
        self.hw_dirty: set[int] = set()
        self.version: dict[int, int] = {}

    def _check(self, addr: int, n: int) -> None:
        if addr < 0 or addr + n > DEVICE_ADDR_BASE:
            raise InvalidLocator(f"host range {addr:#x}+{n} outside host space")

    def page(self, idx: int) -> np.ndarray:
        p = self.pages.get(idx)
        if p is None:
            p = initial_page(idx, self.page_size)
            self.pages[idx] = p
            self.version[idx] = 0
        return p

    def page_range(self, addr: int, n: int) -> range:
        return range(addr // self.page_size, (addr + n - 1) // self.page_size + 1)

    def read(self, addr: int, n: int) -> np.ndarray:
        self._check(addr, n)
        ps = self.page_size
        out = np.empty(n, dtype=np.uint8)
        pos = 0
        while pos < n:
            a = addr + pos
            idx, off = divmod(a, ps)
            take = min(ps - off, n - pos)
            out[pos:pos + take] = self.page(idx)[off:off + take]
            pos += take
        return out

    def write(self, addr: int, data: np.ndarray) -> None:
        n = len(data)
        self._check(addr, n)
        ps = self.page_size
        pos = 0
        while pos < n:
            a = addr + pos
            idx, off = divmod(a, ps)
            take = min(ps - off, n - pos)
            self.page(idx)[off:off + take] = data[pos:pos + take]
            self.hw_dirty.add(idx)
            self.version[idx] += 1
            pos += take

    def clear_dirty(self, pages) -> None:
        self.hw_dirty.difference_update(pages)

    def install_page(self, idx: int, data: np.ndarray) -> None:
        self.pages[idx] = np.array(data, dtype=np.uint8)
        self.version[idx] = 0

    def snapshot(self) -> dict[int, bytes]:
        return {i: self.pages[i].tobytes() for i in sorted(self.pages)}
