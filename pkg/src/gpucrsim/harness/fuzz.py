"""Random valid checkpoint images and byte-level mutations of them, for
round-trip and parser-robustness campaigns."""

from __future__ import annotations

import random
import struct
import zlib

from gpucrsim.api import ApiCall, ApiKind
from gpucrsim.config import DEVICE_ADDR_BASE
from gpucrsim.dag import KernelDag
from gpucrsim.image import (FLAG_DEDUP, HEADER, Allocation, CheckpointImage, GpuRecord,
                            RecordKind)
from gpucrsim.speculation import AccessSpec, Confidence, KNOWN_KERNELS

_KINDS = (ApiKind.LAUNCH_KNOWN, ApiKind.LAUNCH_OPAQUE, ApiKind.MEMCPY_D2D, ApiKind.MEMCPY_H2D)


def _bytes(rng: random.Random, n: int) -> bytes:
    return rng.getrandbits(8 * n).to_bytes(n, "little") if n else b""


def random_dag(rng: random.Random, handles: list[int], n_kernels: int) -> KernelDag:
    dag = KernelDag()
    for seq in range(n_kernels):
        kind = rng.choice(_KINDS)
        pick = lambda k: sorted(rng.sample(handles, min(k, len(handles))))
        reads, writes = pick(rng.randint(0, 3)), pick(rng.randint(0, 2))
        name = None
        if kind is ApiKind.LAUNCH_KNOWN:
            name = rng.choice(sorted(KNOWN_KERNELS))
        elif kind is ApiKind.LAUNCH_OPAQUE:
            name = rng.choice(["vec_add", "bias_act", "k" * rng.randint(1, 40)])
        args = [(rng.getrandbits(64), rng.choice([4, 8])) for _ in range(rng.randint(0, 5))]
        call = ApiCall(seq=seq, kind=kind, stream=rng.randint(0, 3), kernel_name=name, args=args,
                       bytes=rng.randint(0, 1 << 20), duration_ns=rng.randint(0, 10**6),
                       true_reads=reads, true_writes=writes)
        conf = Confidence.SPECULATED if kind is ApiKind.LAUNCH_OPAQUE else Confidence.EXACT
        dag.add_kernel(call, AccessSpec(frozenset(reads), frozenset(writes), conf))
    return dag


def random_image(rng: random.Random, max_buffers: int = 6, page_size: int = 64) -> CheckpointImage:
    """A structurally valid image exercising every record kind."""
    n = rng.randint(0, max_buffers)
    allocations, addr = [], DEVICE_ADDR_BASE
    for h in range(1, n + 1):
        size = rng.randint(1, 300)
        allocations.append(Allocation(h, addr, size))
        addr += -(-size // 256) * 256
    handles = [a.handle for a in allocations]
    dag = random_dag(rng, handles, rng.randint(0, 6)) if handles else KernelDag()
    host: dict[int, bytes] = {}
    for _ in range(rng.randint(0, 4)):
        host[rng.randint(0, 1 << 20)] = _bytes(rng, rng.choice([page_size, rng.randint(0, page_size)]))
    gpu = []
    next_page = 1 << 21
    kernel_ids = sorted(dag.kernels)
    for a in allocations:
        r = rng.random()
        if r < 0.25:
            n_pages = -(-a.size // page_size)
            pages = [_bytes(rng, page_size) for _ in range(n_pages)]
            for i, p in enumerate(pages):
                host[next_page + i] = p
            crc = zlib.crc32(b"".join(pages)[:a.size])
            gpu.append(GpuRecord(a.handle, RecordKind.DEDUP_REF, first_page=next_page,
                                 n_pages=n_pages, crc=crc))
            next_page += n_pages + rng.randint(0, 3)
        elif r < 0.4 and kernel_ids:
            ids = tuple(sorted(rng.sample(kernel_ids, rng.randint(1, min(3, len(kernel_ids))))))
            gpu.append(GpuRecord(a.handle, RecordKind.RECOMPUTE, node_ids=ids))
        else:
            gpu.append(GpuRecord(a.handle, RecordKind.INLINE, data=_bytes(rng, a.size)))
    return CheckpointImage(host_pages=host, gpu=gpu, dag=dag, allocations=allocations,
                           streams=sorted(rng.sample(range(1, 9), rng.randint(0, 3))),
                           next_addr=addr, next_handle=n + 1, cursor=rng.randint(-1, 10**6),
                           flags=rng.choice([0, FLAG_DEDUP]))


def mutate(data: bytes, rng: random.Random) -> bytes:
    """One random corruption: bit flips, truncation, extension, splices,
    overwritten length fields, or a rewritten header."""
    buf = bytearray(data)
    op = rng.randrange(7)
    if op == 0 and buf:
        for _ in range(rng.randint(1, 8)):
            i = rng.randrange(len(buf))
            buf[i] ^= 1 << rng.randrange(8)
    elif op == 1:
        del buf[rng.randint(0, len(buf)):]
    elif op == 2:
        buf += _bytes(rng, rng.randint(1, 64))
    elif op == 3 and buf:
        i = rng.randrange(len(buf))
        j = min(len(buf), i + rng.randint(1, 32))
        chunk = bytes(buf[i:j])
        k = rng.randint(0, len(buf))
        buf[k:k] = chunk
    elif op == 4 and len(buf) >= 4:
        # plausible-but-wrong 32-bit field anywhere
        i = rng.randrange(len(buf) - 3)
        val = rng.choice([0, 1, 0xFFFFFFFF, 0x7FFFFFFF, rng.getrandbits(32), len(buf)])
        struct.pack_into("<I", buf, i, val)
    elif op == 5 and len(buf) >= HEADER.size:
        fields = list(HEADER.unpack_from(buf))
        idx = rng.randrange(1, len(fields))
        fields[idx] = rng.choice([0, 1, 2, 0xFFFF, rng.getrandbits(16)]) if idx < 3 else \
            rng.choice([0, 1, rng.getrandbits(31), len(buf)]) * (-1 if idx == 7 and rng.random() < 0.3 else 1)
        try:
            HEADER.pack_into(buf, 0, *fields)
        except struct.error:
            buf[rng.randrange(len(buf))] ^= 0xFF
    else:
        n = rng.randint(0, 96)
        buf = bytearray(_bytes(rng, n))
        if rng.random() < 0.5 and n >= 4:
            buf[:4] = b"POSI"
    return bytes(buf)
