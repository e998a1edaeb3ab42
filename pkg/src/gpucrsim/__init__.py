"""Deterministic GPU process simulator with concurrent checkpoint/restore."""

from gpucrsim.config import SimConfig, load_config

__all__ = ["SimConfig", "load_config"]
__version__ = "0.1.0"
