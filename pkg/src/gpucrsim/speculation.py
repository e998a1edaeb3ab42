"""Buffer-access inference from launch arguments, and its validation.

Memory moves and vendor-library kernels carry their dataflow in the
signature, so their access sets are exact. Opaque kernels are guessed: every
8-byte argument that lands inside an active allocation is taken as a pointer
to a buffer the kernel both reads and writes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol

from gpucrsim.api import ApiCall, ApiKind, MEMCPY_KINDS

POINTER_SIZE = 8


class KernelClass(enum.Enum):
    MEMORY_MOVE = "MemoryMove"
    KNOWN = "Known"
    OPAQUE = "Opaque"
    NON_DATAFLOW = "NonDataflow"


class Confidence(enum.Enum):
    EXACT = "Exact"
    SPECULATED = "Speculated"


class Phase(enum.Enum):
    CHECKPOINT = "Checkpoint"
    RESTORE = "Restore"


# argument roles of vendor-library kernels: r = input buffer, w = output
# buffer, rw = in/out buffer, s = scalar
KNOWN_KERNELS: dict[str, tuple[str, ...]] = {
    "gemm": ("r", "r", "w", "s", "s", "s"),
    "gemm_accumulate": ("r", "r", "rw", "s", "s", "s"),
    "gemv": ("r", "r", "w", "s"),
    "scale_copy": ("r", "w", "s"),
    "layernorm": ("r", "r", "w", "s"),
    "softmax": ("r", "w", "s"),
    "adam_step": ("rw", "r", "rw", "s"),
}


class AllocationTable(Protocol):
    def lookup(self, addr: int): ...


@dataclass(frozen=True)
class AccessSpec:
    reads: frozenset[int]
    writes: frozenset[int]
    confidence: Confidence

    @property
    def touched(self) -> frozenset[int]:
        return self.reads | self.writes


@dataclass(frozen=True)
class ValidationReport:
    node_id: int
    missed: frozenset[int]
    phase: Phase

    @property
    def ok(self) -> bool:
        return not self.missed


def classify(call: ApiCall) -> KernelClass:
    if call.kind in MEMCPY_KINDS:
        return KernelClass.MEMORY_MOVE
    if call.kind is ApiKind.LAUNCH_KNOWN:
        return KernelClass.KNOWN
    if call.kind is ApiKind.LAUNCH_OPAQUE:
        return KernelClass.OPAQUE
    return KernelClass.NON_DATAFLOW


def _handle(allocations: AllocationTable, addr: int) -> int | None:
    buf = allocations.lookup(addr)
    return None if buf is None else buf.handle


def memcpy_endpoints(call: ApiCall) -> tuple[int, int, int]:
    """(dst, src, count) of a memcpy call; the count defaults to ``bytes``."""
    dst, src = call.args[0][0], call.args[1][0]
    count = call.args[2][0] if len(call.args) > 2 else call.bytes
    return dst, src, count


def infer_access(call: ApiCall, allocations: AllocationTable) -> AccessSpec:
    cls = classify(call)
    if cls is KernelClass.MEMORY_MOVE:
        dst, src, _ = memcpy_endpoints(call)
        reads = set()
        writes = set()
        if call.kind in (ApiKind.MEMCPY_D2H, ApiKind.MEMCPY_D2D):
            h = _handle(allocations, src)
            if h is not None:
                reads.add(h)
        if call.kind in (ApiKind.MEMCPY_H2D, ApiKind.MEMCPY_D2D):
            h = _handle(allocations, dst)
            if h is not None:
                writes.add(h)
        return AccessSpec(frozenset(reads), frozenset(writes), Confidence.EXACT)
    if cls is KernelClass.KNOWN:
        roles = KNOWN_KERNELS[call.kernel_name]
        reads, writes = set(), set()
        for (value, _), role in zip(call.args, roles):
            if role == "s":
                continue
            h = _handle(allocations, value)
            if h is None:
                continue
            if "r" in role:
                reads.add(h)
            if "w" in role:
                writes.add(h)
        return AccessSpec(frozenset(reads), frozenset(writes), Confidence.EXACT)
    if cls is KernelClass.OPAQUE:
        found = set()
        for value, size in call.args:
            if size != POINTER_SIZE:
                continue
            h = _handle(allocations, value)
            if h is not None:
                found.add(h)
        found = frozenset(found)
        return AccessSpec(found, found, Confidence.SPECULATED)
    return AccessSpec(frozenset(), frozenset(), Confidence.EXACT)


def validate(node_id: int, spec: AccessSpec, true_reads, true_writes,
             phase: Phase) -> ValidationReport:
    """Compare a speculation against device ground truth.

    Stands in for the instrumented kernel: a checkpoint only cares about
    writes, a restore about every access.
    """
    if phase is Phase.CHECKPOINT:
        missed = frozenset(true_writes) - spec.writes
    else:
        missed = (frozenset(true_reads) | frozenset(true_writes)) - spec.touched
    return ValidationReport(node_id, missed, phase)
