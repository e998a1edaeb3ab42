"""Deterministic stand-ins for kernel computation.

Effects are applied atomically when a kernel completes. Every written buffer
becomes a keystream seeded by the kernel, the buffer, and a digest of the
kernel's read buffers (whole buffers up to 16 KiB, an even sample beyond),
so equality of final states is a meaningful bit-level check.
"""

from __future__ import annotations

import zlib

import numpy as np

from gpucrsim.api import ApiCall, ApiKind
from gpucrsim.sim.memory import Device, HostMemory, Upstream
from gpucrsim.speculation import memcpy_endpoints


_table = np.zeros(0, dtype=np.uint32)


def _words(m: int) -> np.ndarray:
    global _table
    if len(_table) < m:
        x = np.arange(max(m, 2 * len(_table)), dtype=np.uint64) * np.uint64(0x9E3779B1)
        x ^= x >> np.uint64(15)
        x = (x * np.uint64(0x85EBCA6B)) & np.uint64(0xFFFFFFFF)
        x ^= x >> np.uint64(13)
        _table = x.astype(np.uint32)
    return _table[:m]


def keystream(key: int, n: int) -> np.ndarray:
    w = _words((n + 3) // 4) ^ np.uint32(key & 0xFFFFFFFF)
    w *= np.uint32(0xC2B2AE35)
    w ^= w >> np.uint32(16)
    return w.view(np.uint8)[:n]


def payload(seq: int, n: int) -> np.ndarray:
    """Bytes the application writes into host memory ahead of an H2D copy."""
    return keystream(0x5EED0000 + seq * 7919, n)


def garbage(handle: int, n: int) -> np.ndarray:
    """Fill pattern of a restored buffer whose contents have not arrived yet."""
    return keystream(0xDEAD0000 ^ handle, n) ^ np.uint8(0xA5)


def _kernel_key(call: ApiCall, handle: int) -> int:
    base = zlib.crc32((call.kernel_name or "").encode())
    return (base ^ (call.seq * 2654435761) ^ (handle * 40503)) & 0xFFFFFFFF


SAMPLE_BYTES = 16 * 1024


def _digest(data: np.ndarray, seed: int) -> int:
    # whole buffer when small, an even stride across it when large
    step = max(1, -(-len(data) // SAMPLE_BYTES))
    return zlib.crc32(np.ascontiguousarray(data[::step]).tobytes(), seed)


def kernel_outputs(call: ApiCall, device: Device) -> dict[int, np.ndarray]:
    """New contents of every true-written buffer, computed from current state."""
    mix = 0
    for h in sorted(set(call.true_reads)):
        mix = _digest(device.get(h).data, mix ^ h)
    return {h: keystream(_kernel_key(call, h) ^ mix, device.get(h).size)
            for h in sorted(set(call.true_writes))}


def host_write_at_issue(call: ApiCall, host: HostMemory) -> None:
    """The CPU side of an H2D: the application fills its source region."""
    if call.kind is ApiKind.MEMCPY_H2D:
        _, src, count = memcpy_endpoints(call)
        host.write(src, payload(call.seq, count))


def apply(call: ApiCall, device: Device, host: HostMemory) -> None:
    """Apply the completed call's effect to device and host state."""
    kind = call.kind
    if kind is ApiKind.MEMCPY_H2D:
        dst, src, count = memcpy_endpoints(call)
        buf = device.lookup(dst)
        off = dst - buf.base
        data = host.read(src, count)
        buf.data[off:off + count] = data
        ps = host.page_size
        if off == 0 and count == buf.size and src % ps == 0:
            pages = host.page_range(src, count)
            buf.upstream = Upstream(pages.start, len(pages), zlib.crc32(data.tobytes()))
            host.clear_dirty(pages)
        else:
            buf.upstream = None
    elif kind is ApiKind.MEMCPY_D2H:
        dst, src, count = memcpy_endpoints(call)
        buf = device.lookup(src)
        off = src - buf.base
        host.write(dst, buf.data[off:off + count].copy())
    elif kind is ApiKind.MEMCPY_D2D:
        dst, src, count = memcpy_endpoints(call)
        sbuf, dbuf = device.lookup(src), device.lookup(dst)
        soff, doff = src - sbuf.base, dst - dbuf.base
        dbuf.data[doff:doff + count] = sbuf.data[soff:soff + count].copy()
    else:
        for h, data in kernel_outputs(call, device).items():
            device.get(h).data[:] = data
