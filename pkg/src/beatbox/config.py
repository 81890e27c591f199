"""Platform configuration: port, queues, and execution environments.

Stored as canonical JSON at ``$BEATBOX_DATA_DIR/config.json``; a default is
written on first start.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .canonical import canonical_bytes, canonical_loads
from .runner import EnvironmentDescriptor, ResourceLimits, default_environments
from .scheduler import HEARTBEAT_INTERVAL, HEARTBEAT_TIMEOUT, Queue

DATA_DIR_ENV = "BEATBOX_DATA_DIR"
TOKEN_ENV = "BEATBOX_TOKEN"
URL_ENV = "BEATBOX_URL"


@dataclass(frozen=True)
class Config:
    port: int = 7700
    queues: dict[str, Queue] = field(default_factory=dict)
    environments: dict[str, EnvironmentDescriptor] = field(default_factory=dict)
    heartbeat_interval: float = HEARTBEAT_INTERVAL
    heartbeat_timeout: float = HEARTBEAT_TIMEOUT
    tick_interval: float = 0.2

    def to_doc(self) -> dict:
        return {
            "port": self.port,
            "queues": [q.to_doc() for _, q in sorted(self.queues.items())],
            "environments": [e.to_doc() for _, e in sorted(self.environments.items())],
            "heartbeat_interval": self.heartbeat_interval,
            "heartbeat_timeout": self.heartbeat_timeout,
            "tick_interval": self.tick_interval,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> Config:
        queues = {q["name"]: Queue.from_doc(q) for q in doc.get("queues", [])}
        environments = {e["name"]: EnvironmentDescriptor.from_doc(e) for e in doc.get("environments", [])}
        return cls(
            port=int(doc.get("port", 7700)),
            queues=queues,
            environments=environments,
            heartbeat_interval=float(doc.get("heartbeat_interval", HEARTBEAT_INTERVAL)),
            heartbeat_timeout=float(doc.get("heartbeat_timeout", HEARTBEAT_TIMEOUT)),
            tick_interval=float(doc.get("tick_interval", 0.2)),
        )


def default_config() -> Config:
    queue = Queue(
        name="default",
        limits=ResourceLimits(
            max_memory_bytes=1024 * 1024 * 1024, max_cores=1, max_wall_seconds=300
        ),
    )
    return Config(queues={"default": queue}, environments=default_environments())


def config_path(data_dir: str | Path) -> Path:
    return Path(data_dir) / "config.json"


def load_config(data_dir: str | Path) -> Config:
    path = config_path(data_dir)
    if not path.exists():
        config = default_config()
        save_config(data_dir, config)
        return config
    return Config.from_doc(canonical_loads(path.read_bytes()))


def save_config(data_dir: str | Path, config: Config) -> None:
    path = config_path(data_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical_bytes(config.to_doc()) + b"\n")


def data_dir_from_env(explicit: str | None = None) -> Path:
    chosen = explicit or os.environ.get(DATA_DIR_ENV)
    if not chosen:
        raise SystemExit(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    return Path(chosen)
