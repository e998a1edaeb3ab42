"""Scenario execution: periodic fault-tolerance checkpoints, live migration,
and restore startup, each optionally paired with a stop-the-world baseline."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from gpucrsim.api import ApiCall, load_trace
from gpucrsim.config import SimConfig
from gpucrsim.cr.metrics import MetricsReport
from gpucrsim.cr.pool import ContextPool
from gpucrsim.errors import OracleMismatch
from gpucrsim.harness.runner import SESSIONS, checkpoint_run, direct_run, restore_run
from gpucrsim.harness.workload import PROFILES, WorkloadProfile, gen_workload, sync_points
from gpucrsim.image import read_image
from gpucrsim.process import GpuProcess, states_equal


class ScenarioKind(enum.Enum):
    FAULT_TOLERANCE = "fault_tolerance"
    MIGRATION = "migration"
    STARTUP = "startup"


class Comparator(enum.Enum):
    STOP_THE_WORLD = "stw"
    NONE = "none"


@dataclass
class Scenario:
    kind: ScenarioKind
    profile: WorkloadProfile | None = None   # None: the caller supplies the trace
    config: SimConfig = field(default_factory=SimConfig)
    mode: str = "dirty"
    interval: int | None = None        # FaultTolerance: iterations between checkpoints
    peer: str = "peer0"
    at_seq: int | None = None          # Migration/Startup trigger; default mid-trace sync
    pool_size: int | None = None       # Startup: None uses the config default
    comparator: Comparator = Comparator.STOP_THE_WORLD
    trace_path: str | None = None      # JSONL trace used instead of the profile

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = ScenarioKind(self.kind)
        if isinstance(self.comparator, str):
            self.comparator = Comparator(self.comparator)
        if self.mode not in SESSIONS:
            raise ValueError(f"unknown checkpoint mode {self.mode!r}")
        if self.kind is ScenarioKind.FAULT_TOLERANCE:
            if self.interval is None:
                self.interval = 1
            if self.interval <= 0:
                raise ValueError("interval must be positive")

    @property
    def profile_name(self) -> str:
        if self.profile is not None:
            return self.profile.name
        return Path(self.trace_path).name if self.trace_path else "trace"

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        raw = dict(raw)
        prof = raw.pop("profile", None)
        overrides = raw.pop("profile_overrides", {})
        if prof is None:
            pass
        elif isinstance(prof, str):
            if prof not in PROFILES:
                raise ValueError(f"unknown profile {prof!r}")
            prof = PROFILES[prof]
        else:
            prof = WorkloadProfile(**prof)
        if overrides and prof is not None:
            prof = prof.with_(**overrides)
        cfg = raw.pop("config", {})
        cfg = cfg if isinstance(cfg, SimConfig) else SimConfig().with_overrides(**cfg)
        if "trace" in raw:
            raw["trace_path"] = raw.pop("trace")
        unknown = set(raw) - {"kind", "mode", "interval", "peer", "at_seq", "pool_size",
                              "comparator", "trace_path"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(profile=prof, config=cfg, **raw)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        sc = cls.from_dict(json.loads(Path(path).read_text()))
        if sc.trace_path and not Path(sc.trace_path).is_absolute():
            sc.trace_path = str(Path(path).parent / sc.trace_path)
        return sc


@dataclass
class ScenarioResult:
    scenario: Scenario
    report: MetricsReport
    baseline: MetricsReport | None = None
    checkpoints: int = 0
    final_bytes: int = 0
    dag_bytes: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"scenario": self.scenario.kind.value, "profile": self.scenario.profile_name,
               "mode": self.scenario.mode, "checkpoints": self.checkpoints,
               "final_bytes": self.final_bytes, "dag_bytes": self.dag_bytes,
               "pos": self.report.to_dict()}
        out["base"] = self.baseline.to_dict() if self.baseline is not None else None
        out.update(self.extra)
        return out


def _mid_sync(trace: list[ApiCall]) -> int:
    syncs = sync_points(trace)
    return syncs[len(syncs) // 2]


def _sum_reports(mode: str, reports: list[MetricsReport]) -> MetricsReport:
    out = MetricsReport(mode)
    for r in reports:
        for k in ("stall_ns", "downtime_ns", "bytes_precopy", "bytes_dirty", "bytes_dedup_saved",
                  "cow_copies", "validation_failures", "image_bytes"):
            setattr(out, k, getattr(out, k) + getattr(r, k))
    return out


def _periodic(trace, cfg, mode, interval) -> tuple[GpuProcess, list]:
    """One run with a checkpoint every ``interval`` iterations."""
    syncs = sync_points(trace)
    targets = syncs[interval - 1::interval]
    proc = GpuProcess(cfg, trace)
    sessions = []
    deferred = [False]

    def arm(after: int) -> None:
        nxt = [s for s in targets if s > after]
        if nxt:
            proc.set_trigger(nxt[0], fire)

    def done(_sess) -> None:
        if deferred[0]:
            # a boundary passed while the previous checkpoint was still running
            deferred[0] = False
            proc.clock.after(0, begin)

    def begin() -> None:
        sess = SESSIONS[mode](proc, on_done=done)
        sessions.append(sess)
        sess.begin()

    def fire() -> None:
        arm(proc.cursor)
        if proc.session is not None:
            deferred[0] = True
        else:
            begin()

    arm(-1)
    proc.start()
    proc.run()
    return proc, sessions


def _fault_tolerance(sc: Scenario, trace, direct) -> ScenarioResult:
    proc, sessions = _periodic(trace, sc.config, sc.mode, sc.interval)
    if not states_equal(proc, direct):
        raise OracleMismatch(f"{sc.mode} checkpoints changed the application's final state")
    for sess in sessions:
        img = read_image(sess.image_data)
        restored, _ = restore_run(img, trace, sc.config, "ondemand")
        if not states_equal(restored, direct):
            raise OracleMismatch(f"image at cursor {img.cursor} does not restore to the direct run")
    res = ScenarioResult(sc, _sum_reports(sc.mode, [s.metrics for s in sessions]),
                         checkpoints=len(sessions))
    if sc.comparator is Comparator.STOP_THE_WORLD:
        bproc, base = _periodic(trace, sc.config, "stw", sc.interval)
        if not states_equal(bproc, direct):
            raise OracleMismatch("stop-the-world checkpoints changed the final state")
        res.baseline = _sum_reports("stw", [s.metrics for s in base])
    return res


def migrate(trace, cfg: SimConfig, at_seq: int, mode: str, direct=None):
    """Checkpoint to the network peer without resuming, then restore on demand
    there. Returns (checkpoint session, restore session, restored process)."""
    _, sess = checkpoint_run(trace, cfg, at_seq, mode, target="network", resume=False, finish=False)
    img = read_image(sess.image_data)
    peer, rs = restore_run(img, trace, cfg, "ondemand", image_bytes=len(sess.image_data))
    if direct is not None and not states_equal(peer, direct):
        raise OracleMismatch(f"migrated process diverged (mode {mode}, trigger {at_seq})")
    return sess, rs, peer


def _migration(sc: Scenario, trace, direct) -> ScenarioResult:
    at = sc.at_seq if sc.at_seq is not None else _mid_sync(trace)
    sess, rs, _ = migrate(trace, sc.config, at, sc.mode, direct)
    sess.metrics.restore_first_kernel_ns = rs.metrics.restore_first_kernel_ns
    res = ScenarioResult(sc, sess.metrics, checkpoints=1, final_bytes=sess.final_bytes,
                         dag_bytes=sess.dag_bytes, extra={"peer": sc.peer})
    if sc.comparator is Comparator.STOP_THE_WORLD:
        base, brs, _ = migrate(trace, sc.config, at, "stw", direct)
        base.metrics.restore_first_kernel_ns = brs.metrics.restore_first_kernel_ns
        res.baseline = base.metrics
    return res


def _startup(sc: Scenario, trace, direct) -> ScenarioResult:
    cfg = sc.config
    at = sc.at_seq if sc.at_seq is not None else _mid_sync(trace)
    _, sess = checkpoint_run(trace, cfg, at, sc.mode)
    img = read_image(sess.image_data)
    size = cfg.context_pool_size if sc.pool_size is None else sc.pool_size
    restored, rs = restore_run(img, trace, cfg, "ondemand", ContextPool(size, cfg.context_creation_ns),
                               image_bytes=len(sess.image_data))
    if not states_equal(restored, direct):
        raise OracleMismatch("on-demand restore diverged from the direct run")
    res = ScenarioResult(sc, rs.metrics, checkpoints=1, extra={"pool_size": size})
    if sc.comparator is Comparator.STOP_THE_WORLD:
        full, frs = restore_run(img, trace, cfg, "full", ContextPool(0, cfg.context_creation_ns),
                                image_bytes=len(sess.image_data))
        if not states_equal(full, direct):
            raise OracleMismatch("full restore diverged from the direct run")
        res.baseline = frs.metrics
    return res


_RUNNERS = {ScenarioKind.FAULT_TOLERANCE: _fault_tolerance, ScenarioKind.MIGRATION: _migration,
            ScenarioKind.STARTUP: _startup}


def run_scenario(sc: Scenario, trace: list[ApiCall] | None = None,
                 direct: GpuProcess | None = None) -> ScenarioResult:
    """Execute ``sc``; the final-state oracle is checked before anything is reported."""
    if trace is None and sc.trace_path is not None:
        trace = load_trace(sc.trace_path)
    if trace is None:
        if sc.profile is None:
            raise ValueError("a scenario without a profile needs an explicit trace")
        trace = gen_workload(sc.profile)
    direct = direct if direct is not None else direct_run(trace, sc.config)
    return _RUNNERS[sc.kind](sc, trace, direct)


CSV_FIELDS = ("scenario", "profile", "mode", "sweep_key", "sweep_value", "checkpoints",
              "pos_stall_ns", "base_stall_ns", "pos_downtime_ns", "base_downtime_ns",
              "bytes_precopy", "bytes_dirty", "bytes_dedup_saved", "pos_image_bytes",
              "base_image_bytes", "restore_first_kernel_ns")


def csv_row(res: ScenarioResult, key: str = "", value="") -> dict:
    r, b = res.report, res.baseline
    return {
        "scenario": res.scenario.kind.value, "profile": res.scenario.profile_name,
        "mode": res.scenario.mode, "sweep_key": key, "sweep_value": value,
        "checkpoints": res.checkpoints, "pos_stall_ns": r.stall_ns,
        "base_stall_ns": b.stall_ns if b else "", "pos_downtime_ns": r.downtime_ns,
        "base_downtime_ns": b.downtime_ns if b else "", "bytes_precopy": r.bytes_precopy,
        "bytes_dirty": r.bytes_dirty, "bytes_dedup_saved": r.bytes_dedup_saved,
        "pos_image_bytes": r.image_bytes, "base_image_bytes": b.image_bytes if b else "",
        "restore_first_kernel_ns": "" if r.restore_first_kernel_ns is None else r.restore_first_kernel_ns,
    }


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def sweep(sc: Scenario, key: str, values: list[str],
          trace: list[ApiCall] | None = None) -> list[ScenarioResult]:
    """One scenario per value of a config or profile field."""
    out = []
    prof_keys = set(WorkloadProfile.__dataclass_fields__)
    for v in values:
        if key in prof_keys and sc.profile is not None:
            cur = getattr(sc.profile, key)
            if isinstance(cur, bool):
                val = str(v).strip().lower() in ("1", "true", "yes", "on")
            else:
                val = type(cur)(float(v)) if isinstance(cur, int) else type(cur)(v)
            cell = replace(sc, profile=sc.profile.with_(**{key: val}))
        else:
            cell = replace(sc, config=sc.config.with_overrides(**{key: v}))
        out.append(run_scenario(cell, trace if cell.profile is sc.profile else None))
    return out
