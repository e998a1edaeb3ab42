"""Intercepted driver-API vocabulary, the static rule table, and trace I/O."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from gpucrsim.errors import UnknownApi


class ApiKind(enum.Enum):
    MALLOC = "Malloc"
    FREE = "Free"
    MEMCPY_H2D = "MemcpyH2D"
    MEMCPY_D2H = "MemcpyD2H"
    MEMCPY_D2D = "MemcpyD2D"
    LAUNCH_KNOWN = "LaunchKnown"
    LAUNCH_OPAQUE = "LaunchOpaque"
    STREAM_CREATE = "StreamCreate"
    STREAM_DESTROY = "StreamDestroy"
    DEVICE_SYNCHRONIZE = "DeviceSynchronize"
    STREAM_SYNCHRONIZE = "StreamSynchronize"
    GET_DEVICE = "GetDevice"


MEMCPY_KINDS = frozenset({ApiKind.MEMCPY_H2D, ApiKind.MEMCPY_D2H, ApiKind.MEMCPY_D2D})
LAUNCH_KINDS = frozenset({ApiKind.LAUNCH_KNOWN, ApiKind.LAUNCH_OPAQUE})
DATAFLOW_KINDS = MEMCPY_KINDS | LAUNCH_KINDS


@dataclass
class ApiCall:
    seq: int
    kind: ApiKind
    stream: int | None = None
    kernel_name: str | None = None
    args: list[tuple[int, int]] = field(default_factory=list)
    bytes: int = 0
    duration_ns: int = 0
    # ground truth, visible only to the device model and the validator
    true_reads: list[int] = field(default_factory=list)
    true_writes: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "seq": self.seq,
            "kind": self.kind.value,
            "stream": self.stream,
            "kernel_name": self.kernel_name,
            "args": [{"v": v, "size": s} for v, s in self.args],
            "bytes": self.bytes,
            "duration_ns": self.duration_ns,
            "true_reads": list(self.true_reads),
            "true_writes": list(self.true_writes),
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ApiCall":
        d = json.loads(line)
        return cls(
            seq=int(d["seq"]),
            kind=ApiKind(d["kind"]),
            stream=d.get("stream"),
            kernel_name=d.get("kernel_name"),
            args=[(int(a["v"]), int(a["size"])) for a in d.get("args", [])],
            bytes=int(d.get("bytes", 0)),
            duration_ns=int(d.get("duration_ns", 0)),
            true_reads=[int(h) for h in d.get("true_reads", [])],
            true_writes=[int(h) for h in d.get("true_writes", [])],
        )


def dump_trace(calls: Iterable[ApiCall], path: str | Path) -> None:
    with open(path, "w") as fh:
        for c in calls:
            fh.write(c.to_json() + "\n")


def iter_trace(path: str | Path) -> Iterator[ApiCall]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield ApiCall.from_json(line)


def load_trace(path: str | Path) -> list[ApiCall]:
    return list(iter_trace(path))


class RuleAction(enum.Enum):
    SKIP = "skip"
    REGISTER = "register"      # resource management: allocation/stream tables, no node
    ADD_NODE = "add_node"
    CLEAR_DAG = "clear_dag"


@dataclass(frozen=True)
class DagRule:
    action: RuleAction
    extractor: str | None = None   # "exact" | "declared" | "speculative"
    scope: str | None = None       # "device" | "stream"


RULES: dict[ApiKind, DagRule] = {
    ApiKind.GET_DEVICE: DagRule(RuleAction.SKIP),
    ApiKind.MALLOC: DagRule(RuleAction.REGISTER),
    ApiKind.FREE: DagRule(RuleAction.REGISTER),
    ApiKind.STREAM_CREATE: DagRule(RuleAction.REGISTER),
    ApiKind.STREAM_DESTROY: DagRule(RuleAction.REGISTER),
    ApiKind.MEMCPY_H2D: DagRule(RuleAction.ADD_NODE, extractor="exact"),
    ApiKind.MEMCPY_D2H: DagRule(RuleAction.ADD_NODE, extractor="exact"),
    ApiKind.MEMCPY_D2D: DagRule(RuleAction.ADD_NODE, extractor="exact"),
    ApiKind.LAUNCH_KNOWN: DagRule(RuleAction.ADD_NODE, extractor="declared"),
    ApiKind.LAUNCH_OPAQUE: DagRule(RuleAction.ADD_NODE, extractor="speculative"),
    ApiKind.DEVICE_SYNCHRONIZE: DagRule(RuleAction.CLEAR_DAG, scope="device"),
    ApiKind.STREAM_SYNCHRONIZE: DagRule(RuleAction.CLEAR_DAG, scope="stream"),
}

assert set(RULES) == set(ApiKind), "rule table must be total"


def rule_for(kind: ApiKind) -> DagRule:
    try:
        return RULES[kind]
    except KeyError:
        raise UnknownApi(str(kind)) from None
