"""Running traces with and without C/R, and the state oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

from gpucrsim.api import ApiCall, ApiKind
from gpucrsim.config import SimConfig
from gpucrsim.cr.checkpoint import CheckpointSession, CowSession, DirtyBitSession, StwSession
from gpucrsim.cr.pool import ContextPool
from gpucrsim.cr.restore import RestoreSession
from gpucrsim.errors import BadState
from gpucrsim.image import CheckpointImage, read_image
from gpucrsim.process import GpuProcess, Session, states_equal
from gpucrsim.sim import effects
from gpucrsim.sim.memory import Device, HostMemory

SESSIONS = {"stw": StwSession, "cow": CowSession, "dirty": DirtyBitSession}


def direct_run(trace: list[ApiCall], cfg: SimConfig) -> GpuProcess:
    proc = GpuProcess(cfg, trace)
    proc.start()
    proc.run()
    return proc


def checkpoint_run(trace: list[ApiCall], cfg: SimConfig, at_seq: int, mode: str,
                   target: str = "memory", resume: bool = True, coordinated: bool = True,
                   finish: bool = True) -> tuple[GpuProcess, CheckpointSession]:
    """Run ``trace`` and checkpoint right after ``at_seq`` is admitted.

    With ``finish`` the process then runs to the end of the trace (only
    meaningful when it resumes); otherwise the run stops once the image is
    complete.
    """
    if mode not in SESSIONS:
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    proc = GpuProcess(cfg, trace)
    session = SESSIONS[mode](proc, target=target, resume=resume, coordinated=coordinated)
    proc.set_trigger(at_seq, session.begin)
    proc.start()
    if finish and resume:
        proc.run()
    else:
        proc.clock.run_until(until=lambda: session.done)
    if not session.done:
        raise BadState(f"checkpoint at seq {at_seq} never completed")
    return proc, session


def restore_run(image: CheckpointImage, trace: list[ApiCall], cfg: SimConfig, mode: str = "ondemand",
                pool: ContextPool | None = None, image_bytes: int = 0) -> tuple[GpuProcess, RestoreSession]:
    proc = GpuProcess(cfg, trace)
    session = RestoreSession(proc, image, mode, pool, image_bytes=image_bytes)
    session.begin()
    proc.run()
    if not session.done:
        raise BadState("restore session did not complete")
    if session.metrics.restore_first_kernel_ns is None:
        # the first kernel launched after the session had already wound down
        session.metrics.restore_first_kernel_ns = proc.first_kernel_at
    return proc, session


class _ValidateAll(Session):
    """Every opaque launch runs under the access validator for the whole run."""

    def instrumented(self, node) -> bool:
        return node.call.kind is ApiKind.LAUNCH_OPAQUE


def instrumentation_overhead(trace: list[ApiCall], cfg: SimConfig,
                             direct: GpuProcess | None = None) -> tuple[float, float]:
    """(slowdown, opaque share of kernel time) with validation always on."""
    direct = direct if direct is not None else direct_run(trace, cfg)
    proc = GpuProcess(cfg, trace)
    proc.session = _ValidateAll()
    proc.start()
    proc.run()
    kernel = [c for c in trace if c.kind in (ApiKind.LAUNCH_KNOWN, ApiKind.LAUNCH_OPAQUE)]
    total = sum(c.duration_ns for c in kernel)
    opaque = sum(c.duration_ns for c in kernel if c.kind is ApiKind.LAUNCH_OPAQUE)
    slowdown = proc.clock.now / direct.clock.now - 1.0
    return slowdown, (opaque / total if total else 0.0)


def reference_state(trace: list[ApiCall], cfg: SimConfig, upto_seq: int | None = None):
    """Sequential, timing-free execution of the trace prefix (an independent oracle)."""
    dev = Device(cfg.device_capacity, cfg.chunk_size)
    host = HostMemory(cfg.page_size)
    for call in trace:
        if upto_seq is not None and call.seq > upto_seq:
            break
        k = call.kind
        if k is ApiKind.MALLOC:
            dev.alloc(call.bytes)
        elif k is ApiKind.FREE:
            dev.free(dev.lookup(call.args[0][0]).handle)
        elif k in (ApiKind.MEMCPY_H2D, ApiKind.MEMCPY_D2H, ApiKind.MEMCPY_D2D,
                   ApiKind.LAUNCH_KNOWN, ApiKind.LAUNCH_OPAQUE):
            effects.host_write_at_issue(call, host)
            effects.apply(call, dev, host)
    proc = GpuProcess(cfg)
    proc.device, proc.host = dev, host
    return proc


def prefix(trace: list[ApiCall], cursor: int) -> list[ApiCall]:
    return [c for c in trace if c.seq <= cursor]


@dataclass
class OracleResult:
    ok: bool
    mode: str
    at_seq: int
    cursor: int = -1
    checks: dict[str, bool] = field(default_factory=dict)
    session: CheckpointSession | None = None
    image: CheckpointImage | None = None


def compare_oracle(trace: list[ApiCall], at_seq: int, mode: str, cfg: SimConfig,
                   direct: GpuProcess | None = None, ondemand: bool = True) -> OracleResult:
    """Concurrent checkpoint + restore versus a stop-the-world checkpoint at
    the protocol's equivalence point (the image cursor)."""
    proc, sess = checkpoint_run(trace, cfg, at_seq, mode)
    img = read_image(sess.image_data)
    c = img.cursor
    head = prefix(trace, c)
    res = OracleResult(True, mode, at_seq, c, session=sess, image=img)
    if direct is None:
        direct = direct_run(trace, cfg)
    res.checks["source_final"] = states_equal(proc, direct)
    _, stw = checkpoint_run(trace, cfg, c, "stw", finish=False)
    stw_img = read_image(stw.image_data)
    a, _ = restore_run(img, head, cfg, "full")
    b, _ = restore_run(stw_img, head, cfg, "full")
    res.checks["equivalence_point"] = states_equal(a, b)
    full, _ = restore_run(img, trace, cfg, "full")
    res.checks["restored_final_full"] = states_equal(full, direct)
    if ondemand:
        od, _ = restore_run(img, trace, cfg, "ondemand")
        res.checks["restored_final_ondemand"] = states_equal(od, direct)
    res.ok = all(res.checks.values())
    return res
