"""Command-line front end: checkpoint, restore, migrate, benchmark, inspect.

Machine-readable results go to stdout as JSON (CSV for sweeps, to a file);
progress and errors go to stderr. Exit codes: 0 ok, 1 usage error,
2 corrupt image, 3 oracle mismatch.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from gpucrsim.api import ApiCall, load_trace
from gpucrsim.config import SimConfig, load_config
from gpucrsim.cr.pool import ContextPool
from gpucrsim.errors import CorruptImage, OracleMismatch, SimError
from gpucrsim.harness.runner import checkpoint_run, restore_run
from gpucrsim.harness.scenario import (Scenario, ScenarioKind, csv_row, run_scenario, sweep,
                                       to_csv)
from gpucrsim.harness.workload import PROFILES, gen_workload, sync_points
from gpucrsim.image import RecordKind, read_image, section_sizes
from gpucrsim.process import state_digest

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT, EXIT_ORACLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_UNITS = {"": 1, "k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12}


def parse_bandwidth(text: str) -> int:
    """Bytes per second from '25e9', '25G', '25GB' or '25GB/s'."""
    m = re.fullmatch(r"\s*([0-9.eE+]+)\s*([kKmMgGtT]?)(?:[bB](?:/s)?)?\s*", text)
    if not m:
        raise UsageError(f"bad bandwidth {text!r}")
    try:
        value = float(m.group(1)) * _UNITS[m.group(2).lower()]
    except ValueError:
        raise UsageError(f"bad bandwidth {text!r}") from None
    if value <= 0:
        raise UsageError("bandwidth must be positive")
    return int(value)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args) -> SimConfig:
    try:
        return load_config(args.config)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load config: {exc}") from None


def _trace(args) -> list[ApiCall]:
    if args.profile:
        if args.profile not in PROFILES:
            raise UsageError(f"unknown profile {args.profile!r}; choose from {sorted(PROFILES)}")
        return gen_workload(PROFILES[args.profile])
    try:
        return load_trace(args.trace)
    except OSError as exc:
        raise UsageError(f"cannot read trace: {exc}") from None


def _at(args, trace: list[ApiCall]) -> int:
    if args.at is None:
        syncs = sync_points(trace)
        if not syncs:
            raise UsageError("trace has no synchronization point; pass --at")
        return syncs[len(syncs) // 2]
    if not 0 <= args.at < len(trace):
        raise UsageError(f"--at {args.at} is outside the trace (0..{len(trace) - 1})")
    return args.at


def _read_image_file(path: str):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read image: {exc}") from None
    return data, read_image(data)


def cmd_ckpt(args) -> int:
    cfg = _config(args)
    trace = _trace(args)
    at = _at(args, trace)
    _note(f"checkpointing ({args.mode}) after seq {at} of {len(trace)} calls")
    _, sess = checkpoint_run(trace, cfg, at, args.mode, target=args.target, finish=False)
    Path(args.out).write_bytes(sess.image_data)
    _emit({"image": args.out, "at_seq": at, "cursor": sess.image.cursor,
           "sections": section_sizes(sess.image_data), "final_bytes": sess.final_bytes,
           "metrics": sess.metrics.to_dict()})
    return EXIT_OK


def cmd_restore(args) -> int:
    cfg = _config(args)
    data, img = _read_image_file(args.image)
    trace = _trace(args) if (args.trace or args.profile) else []
    size = cfg.context_pool_size if args.pool is None else args.pool
    pool = ContextPool(size, cfg.context_creation_ns)
    _note(f"restoring ({args.mode}) at cursor {img.cursor}")
    proc, sess = restore_run(img, trace, cfg, args.mode, pool, image_bytes=len(data))
    _emit({"cursor": img.cursor, "fallbacks": sess.fallbacks, "pool_size": size,
           "state_digest": state_digest(proc), "metrics": sess.metrics.to_dict()})
    return EXIT_OK


def cmd_migrate(args) -> int:
    cfg = _config(args)
    if args.net_bw:
        cfg = cfg.with_overrides(network_bw=parse_bandwidth(args.net_bw))
    trace = _trace(args)
    at = _at(args, trace)
    sc = Scenario(ScenarioKind.MIGRATION, PROFILES.get(args.profile), cfg, mode=args.mode,
                  at_seq=at, peer=args.peer, trace_path=args.trace)
    _note(f"migrating ({args.mode}) after seq {at} at {cfg.network_bw} B/s")
    res = run_scenario(sc, trace)
    _emit(res.to_dict())
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        sc = Scenario.load(args.scenario)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad scenario file: {exc}") from None
    if args.config:
        sc.config = _config(args)
    if args.sweep:
        key, sep, vals = args.sweep.partition("=")
        values = [v for v in vals.split(",") if v]
        if not sep or not key or not values:
            raise UsageError("--sweep expects key=a,b,c")
        try:
            results = sweep(sc, key.strip(), values)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = [csv_row(r, key.strip(), v) for r, v in zip(results, values)]
    else:
        results = [run_scenario(sc)]
        rows = [csv_row(results[0])]
    Path(args.csv).write_text(to_csv(rows))
    _note(f"wrote {len(rows)} row(s) to {args.csv}")
    _emit([r.to_dict() for r in results])
    return EXIT_OK


def cmd_inspect(args) -> int:
    data, img = _read_image_file(args.image)
    kinds = {k.name.lower(): 0 for k in RecordKind}
    for rec in img.gpu:
        kinds[rec.kind.name.lower()] += 1
    total = sum(a.size for a in img.allocations)
    saved = img.dedup_saved()
    _emit({"bytes": len(data), "sections": section_sizes(data), "cursor": img.cursor,
           "flags": img.flags, "buffers": len(img.allocations), "buffer_bytes": total,
           "records": kinds, "host_pages": len(img.host_pages),
           "dedup_saved": saved, "dedup_fraction": saved / total if total else 0.0,
           "dag_nodes": len(img.dag.kernels), "dag_pending_kernels": len(img.dag.pending())})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpucrsim", description="Simulated GPU checkpoint/restore.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, trace=True, required=True):
        sp.add_argument("--config", help="config file (JSON or key = value); "
                        "defaults to $GPUCRSIM_CONFIG")
        if trace:
            g = sp.add_mutually_exclusive_group(required=required)
            g.add_argument("--trace", help="JSONL trace file")
            g.add_argument("--profile", help="built-in workload profile name")

    c = sub.add_parser("ckpt", help="checkpoint a running trace")
    common(c)
    c.add_argument("--at", type=int, help="trigger after this seq (default: mid-trace sync)")
    c.add_argument("--mode", choices=["cow", "dirty", "stw"], default="dirty")
    c.add_argument("--target", choices=["memory", "network"], default="memory")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_ckpt)

    r = sub.add_parser("restore", help="restore an image and run the rest of a trace")
    common(r, required=False)
    r.add_argument("--image", required=True)
    r.add_argument("--mode", choices=["ondemand", "full"], default="ondemand")
    r.add_argument("--pool", type=int, help="context pool size (0 pays creation latency)")
    r.set_defaults(fn=cmd_restore)

    m = sub.add_parser("migrate", help="live-migrate to a peer and verify")
    common(m)
    m.add_argument("--at", type=int)
    m.add_argument("--net-bw", help="network bandwidth, e.g. 25GB or 25e9")
    m.add_argument("--mode", choices=["cow", "dirty", "stw"], default="dirty")
    m.add_argument("--peer", default="peer0")
    m.set_defaults(fn=cmd_migrate)

    b = sub.add_parser("bench", help="run a scenario file, optionally sweeping one key")
    common(b, trace=False)
    b.add_argument("--scenario", required=True)
    b.add_argument("--sweep", help="key=a,b,c over a config or profile field")
    b.add_argument("--csv", required=True)
    b.set_defaults(fn=cmd_bench)

    i = sub.add_parser("inspect", help="summarize an image")
    i.add_argument("--image", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "pool", None) is not None and args.pool < 0:
            raise UsageError("--pool must be non-negative")
        return args.fn(args)
    except UsageError as exc:
        _note(f"usage error: {exc}")
        return EXIT_USAGE
    except CorruptImage as exc:
        _note(f"corrupt image: {exc}")
        return EXIT_CORRUPT
    except OracleMismatch as exc:
        _note(f"oracle mismatch: {exc}")
        return EXIT_ORACLE
    except SimError as exc:
        _note(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
