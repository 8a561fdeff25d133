"""Daemon configuration: JSON file, flag overrides, CASPAXOS_* env overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from ..core import ConfigError, Configuration

ENV_PREFIX = "CASPAXOS_"


@dataclass
class NodeConfig:
    node_id: str = ""
    role: str = ""  # "acceptor" | "proposer"
    listen: str = "127.0.0.1:0"
    peers: dict = field(default_factory=dict)  # node id -> host:port
    acceptors: tuple = ()
    proposers: tuple = ()
    prepare_quorum: int | None = None
    accept_quorum: int | None = None
    storage_dir: str = ""
    mode: str = "2phase"  # or "1rtt"
    tick_ms: float = 5.0
    phase_timeout_ticks: int = 120
    gc_interval_ticks: int = 40
    op_timeout_ticks: int = 400
    fsync: bool = True
    trace_file: str = ""

    def configuration(self) -> Configuration:
        cfg = Configuration.majority(self.acceptors)
        if self.prepare_quorum is not None:
            cfg = cfg.replace(prepare_quorum=self.prepare_quorum)
        if self.accept_quorum is not None:
            cfg = cfg.replace(accept_quorum=self.accept_quorum)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.node_id:
            raise ConfigError("node_id is required")
        if self.role not in ("acceptor", "proposer"):
            raise ConfigError(f"bad role {self.role!r}")
        if self.mode not in ("2phase", "1rtt"):
            raise ConfigError(f"bad mode {self.mode!r}")
        if self.role == "proposer":
            if not self.acceptors:
                raise ConfigError("proposer needs an acceptor roster")
            self.configuration()  # raises on non-intersecting quorums
        if not self.storage_dir:
            raise ConfigError("storage_dir is required")


_TUPLE_FIELDS = {"acceptors", "proposers"}
_INT_FIELDS = {"prepare_quorum", "accept_quorum", "phase_timeout_ticks", "gc_interval_ticks", "op_timeout_ticks"}
_FLOAT_FIELDS = {"tick_ms"}
_BOOL_FIELDS = {"fsync"}


def _coerce(name: str, raw):
    if name in _TUPLE_FIELDS and isinstance(raw, (list, tuple)):
        return tuple(raw)
    if name in _TUPLE_FIELDS and isinstance(raw, str):
        return tuple(x for x in raw.split(",") if x)
    if name == "peers" and isinstance(raw, str):
        pairs = (item.split("=", 1) for item in raw.split(",") if item)
        return {k: v for k, v in pairs}
    if name in _INT_FIELDS and raw is not None:
        return int(raw)
    if name in _FLOAT_FIELDS:
        return float(raw)
    if name in _BOOL_FIELDS and isinstance(raw, str):
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def load_config(path: str | None = None, overrides: dict | None = None) -> NodeConfig:
    """Layered load: file, then CASPAXOS_* environment, then explicit flags."""
    values: dict = {}
    if path:
        with open(path) as fh:
            values.update(json.load(fh))
    known = {f.name for f in fields(NodeConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for name in known:
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = env
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value
    values = {name: _coerce(name, value) for name, value in values.items()}
    config = NodeConfig(**values)
    config.validate()
    return config
