from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigInvalid, InvalidArgument
from ..model import Endpoint
from ..nat import NatConfig
from ..policy import PolicyConfig
from ..scheduler import SchedulerConfig
from ..sim.harness import AgentTemplate, ClusterTemplate

ENV_VAR = "METASCHED_CONFIG"


def parse_listen(text: str) -> tuple[str, int]:
    """host:port; port 0 asks the OS for a free port."""
    host, sep, port = str(text).rpartition(":")
    try:
        port = int(port)
        if not sep or not 0 <= port <= 65535:
            raise ValueError(text)
        Endpoint(host, 1)
    except (ValueError, InvalidArgument):
        raise ConfigInvalid(f"listen must be IPv4 host:port, got {text!r}") from None
    return host, port


def _writable(path: Path, what: str):
    # missing directories are created at startup; the nearest existing one must be writable
    parent = path.parent if str(path.parent) else Path(".")
    while not parent.exists() and parent != parent.parent:
        parent = parent.parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise ConfigInvalid(f"{what} {path} is not writable")
    if path.exists() and not os.access(path, os.W_OK):
        raise ConfigInvalid(f"{what} {path} is not writable")


@dataclass
class ServiceConfig:
    event_log_path: Path
    snapshot_path: Path
    listen: str = "127.0.0.1:7070"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    clusters: list = field(default_factory=list)
    nat: NatConfig = field(default_factory=NatConfig)
    tick_period_s: float = 1.0
    snapshot_every: int = 1000
    heartbeat_s: float = 10
    offer_ttl_s: float = 5
    liveness_timeout_s: float = 30
    max_requeues: int = 3

    def __post_init__(self):
        self.event_log_path = Path(self.event_log_path)
        self.snapshot_path = Path(self.snapshot_path)
        if not self.tick_period_s > 0:
            raise ConfigInvalid("tick_period_s must be positive")
        if self.snapshot_every < 1:
            raise ConfigInvalid("snapshot_every must be at least 1")
        parse_listen(self.listen)
        _writable(self.event_log_path, "event_log_path")
        _writable(self.snapshot_path, "snapshot_path")

    @property
    def host_port(self) -> tuple[str, int]:
        return parse_listen(self.listen)

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(policy=self.policy, nat=self.nat, offer_ttl_s=self.offer_ttl_s,
                               liveness_timeout_s=self.liveness_timeout_s,
                               max_requeues=self.max_requeues,
                               tick_period_s=self.tick_period_s)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ServiceConfig":
        d = dict(d)
        try:
            for k in ("event_log_path", "snapshot_path"):
                p = Path(d[k])
                if base_dir is not None and not p.is_absolute():
                    p = Path(base_dir) / p
                d[k] = p
            if "policy" in d:
                d["policy"] = PolicyConfig.from_dict(d["policy"])
            if "nat" in d:
                d["nat"] = NatConfig.from_dict(d["nat"])
            d["clusters"] = [ClusterTemplate(c["cluster_id"],
                                             tuple(AgentTemplate(**a) for a in c["agents"]),
                                             c.get("display_name", ""))
                             for c in d.get("clusters", [])]
            unknown = set(d) - set(cls.__dataclass_fields__)
            if unknown:
                raise ConfigInvalid(f"unknown service config keys: {sorted(unknown)}")
            return cls(**d)
        except ConfigInvalid:
            raise
        except (KeyError, TypeError, ValueError, InvalidArgument) as exc:
            raise ConfigInvalid(f"bad service config: {exc}") from None

    @classmethod
    def load(cls, path=None) -> "ServiceConfig":
        path = path or os.environ.get(ENV_VAR)
        if not path:
            raise ConfigInvalid(f"no config given and {ENV_VAR} is unset")
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
        return cls.from_dict(raw, base_dir=Path(path).parent)
