from __future__ import annotations

import json
from dataclasses import asdict, dataclass


@dataclass
class MetricsReport:
    mode: str
    stall_ns: int = 0
    downtime_ns: int = 0
    bytes_precopy: int = 0
    bytes_dirty: int = 0
    bytes_dedup_saved: int = 0
    cow_copies: int = 0
    validation_failures: int = 0
    image_bytes: int = 0
    restore_first_kernel_ns: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
