"""Simulation configuration.

Rates are bytes per second, times are integer nanoseconds. A config file may
be JSON or ``key = value`` lines; unknown keys are rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

DEVICE_ADDR_BASE = 0x7000_0000_0000
HOST_ADDR_BASE = 0x1000_0000
KiB = 1024
MiB = 1024 * KiB
GB = 10**9


@dataclass(frozen=True)
class SimConfig:
    pcie_bw: int = 22 * GB
    network_bw: int = 25 * GB
    device_bw: int = 1000 * GB
    checksum_bw: int = 326 * GB
    chunk_size: int = 64 * KiB
    page_size: int = 4 * KiB
    device_capacity: int = 80 * GB
    context_creation_ns: int = 2_000_000_000
    context_pool_size: int = 2
    # fraction of Active buffers; crossing it switches dirty-bit to DAG retention
    dirty_threshold: float = 0.25
    cow_delay_threshold_ns: int = 500_000
    # fraction of device capacity usable as CoW staging
    staging_fraction: float = 1 / 16
    instrumentation_factor: float = 1.2
    dedup: bool = True
    max_events: int = 10**8

    @property
    def staging_capacity(self) -> int:
        return int(self.device_capacity * self.staging_fraction)

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **_coerce(kw))

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def _coerce(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key: {key}")
        kind = _FIELD_TYPES[key]
        if kind == "bool":
            if isinstance(value, str):
                value = value.strip().lower() in ("1", "true", "yes", "on")
            out[key] = bool(value)
        elif kind == "int":
            out[key] = int(float(value))
        else:
            out[key] = float(value)
    return out


def parse_config_text(text: str) -> SimConfig:
    text = text.strip()
    if not text:
        return SimConfig()
    if text.startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    return SimConfig().with_overrides(**raw)


def load_config(path: str | os.PathLike | None = None) -> SimConfig:
    """Load a config file; falls back to ``$GPUCRSIM_CONFIG`` then defaults."""
    if path is None:
        path = os.environ.get("GPUCRSIM_CONFIG")
    if not path:
        return SimConfig()
    return parse_config_text(Path(path).read_text())


def transfer_ns(nbytes: int, bandwidth: int) -> int:
    """Whole nanoseconds to move ``nbytes`` at ``bandwidth`` (rounded up)."""
    return -(-nbytes * 10**9 // bandwidth)
