"""Content-addressed filesystem cache for block outputs.

Entry layout: ``cache/<k[0:2]>/<k[2:4]>/<k>/`` holding ``meta.json``, one
``out.<endpoint>.data`` file per output channel, and ``checksums.json``
mapping file name to SHA-256. Entries become visible through a single
directory rename, so readers only ever observe complete entries.
"""
from __future__ import annotations

import hashlib
import io
import os
import re
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .canonical import canonical_bytes, canonical_digest, canonical_loads
from .channels import ChannelData, read_items, write_items
from .model import ObjectRef

_KEY_RE = re.compile(r"^[0-9a-f]{64}$")


class CacheError(Exception):
    pass


class CorruptEntryError(CacheError):
    """Entry exists but fails its checksums; distinct from a miss."""


def is_cache_key(text: str) -> bool:
    return bool(_KEY_RE.match(text))


def compute_cache_key(
    algorithm_digest: str,
    parameters: dict[str, Any],
    environment: str,
    inputs: dict[str, tuple[str, str]],
    fold: tuple[int, int] | None = None,
) -> str:
    """Digest of everything that determines a block execution's outputs."""
    return canonical_digest(
        {
            "algorithm": algorithm_digest,
            "parameters": parameters,
            "environment": environment,
            "inputs": {
                endpoint: {"key": upstream_key, "output": upstream_endpoint}
                for endpoint, (upstream_key, upstream_endpoint) in inputs.items()
            },
            "fold": None if fold is None else {"index": fold[0], "of": fold[1]},
        }
    )


@dataclass(frozen=True)
class ExecutionStats:
    cpu_seconds: float = 0.0
    peak_memory_bytes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0

    def to_doc(self) -> dict:
        return {
            "cpu_seconds": self.cpu_seconds,
            "peak_memory_bytes": self.peak_memory_bytes,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> ExecutionStats:
        return cls(
            cpu_seconds=float(doc.get("cpu_seconds", 0.0)),
            peak_memory_bytes=int(doc.get("peak_memory_bytes", 0)),
            bytes_read=int(doc.get("bytes_read", 0)),
            bytes_written=int(doc.get("bytes_written", 0)),
        )


@dataclass(frozen=True)
class CacheEntry:
    """Complete output of one block execution."""

    key: str
    outputs: dict[str, ChannelData] = field(default_factory=dict)
    results: dict[str, dict] = field(default_factory=dict)  # name -> {kind, value}
    stats: ExecutionStats = field(default_factory=ExecutionStats)
    experiment: str = ""
    block: str = ""
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not is_cache_key(self.key):
            raise CacheError(f"malformed cache key {self.key!r}")

    def meta_doc(self) -> dict:
        return {
            "key": self.key,
            "outputs": {
                endpoint: {"format": channel.format.render(), "items": len(channel.items)}
                for endpoint, channel in self.outputs.items()
            },
            "results": self.results,
            "stats": self.stats.to_doc(),
            "producer": {
                "experiment": self.experiment,
                "block": self.block,
                "timestamp": self.timestamp,
            },
        }


class BlockCache:
    """Filesystem cache shared by scheduler and workers."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _entry_dir(self, key: str) -> Path:
        if not is_cache_key(key):
            raise CacheError(f"malformed cache key {key!r}")
        return self.root / key[0:2] / key[2:4] / key

    def contains(self, key: str) -> bool:
        return (self._entry_dir(key) / "checksums.json").exists()

    def put(self, entry: CacheEntry) -> str:
        """Store an entry; returns "stored" or "already-present".

        Concurrent identical puts converge: the first rename wins and later
        writers discard their temp directory.
        """
        final = self._entry_dir(key := entry.key)
        if self.contains(key):
            return "already-present"
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{key[:8]}-", dir=self.root))
        try:
            files: dict[str, bytes] = {"meta.json": canonical_bytes(entry.meta_doc())}
            for endpoint, channel in entry.outputs.items():
                buf = io.BytesIO()
                write_items(buf, channel.items)
                files[f"out.{endpoint}.data"] = buf.getvalue()
            checksums = {
                name: hashlib.sha256(data).hexdigest() for name, data in files.items()
            }
            files["checksums.json"] = canonical_bytes(checksums)
            for name, data in files.items():
                path = tmp / name
                with open(path, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
            try:
                os.rename(tmp, final)
            except OSError:
                if self.contains(key):  # lost the race to an identical put
                    shutil.rmtree(tmp, ignore_errors=True)
                    return "already-present"
                raise
            return "stored"
        except Exception:
            shutil.rmtree(tmp, ignore_errors=True)
            raise

    def get(self, key: str) -> CacheEntry | None:
        """Fetch an entry; None on miss, CorruptEntryError on tampering."""
        entry_dir = self._entry_dir(key)
        checksums_path = entry_dir / "checksums.json"
        if not checksums_path.exists():
            return None
        try:
            checksums = canonical_loads(checksums_path.read_bytes())
            contents: dict[str, bytes] = {}
            for name, expected in checksums.items():
                data = (entry_dir / name).read_bytes()
                if hashlib.sha256(data).hexdigest() != expected:
                    raise CorruptEntryError(f"checksum mismatch for {name} in {key}")
                contents[name] = data
            meta = canonical_loads(contents["meta.json"])
            outputs: dict[str, ChannelData] = {}
            for endpoint, info in meta.get("outputs", {}).items():
                items = read_items(io.BytesIO(contents[f"out.{endpoint}.data"]))
                outputs[endpoint] = ChannelData(
                    format=ObjectRef.parse("format", info["format"]), items=tuple(items)
                )
        except CorruptEntryError:
            raise
        except Exception as exc:
            raise CorruptEntryError(f"unreadable cache entry {key}: {exc}") from exc
        os.utime(entry_dir, None)  # LRU access tracking via directory mtime
        producer = meta.get("producer", {})
        return CacheEntry(
            key=key,
            outputs=outputs,
            results=meta.get("results", {}),
            stats=ExecutionStats.from_doc(meta.get("stats", {})),
            experiment=producer.get("experiment", ""),
            block=producer.get("block", ""),
            timestamp=producer.get("timestamp", 0.0),
        )

    def result_digest(self, key: str) -> str:
        """Digest of an entry's analyzer results, for snapshot comparison."""
        entry = self.get(key)
        if entry is None:
            raise CacheError(f"missing cache entry {key}")
        return canonical_digest(entry.results)

    def entries(self) -> list[tuple[str, float, int]]:
        """All complete entries as (key, last-access, total bytes)."""
        found = []
        for checksums in self.root.glob("??/??/*/checksums.json"):
            entry_dir = checksums.parent
            key = entry_dir.name
            if not is_cache_key(key):
                continue
            size = sum(p.stat().st_size for p in entry_dir.iterdir() if p.is_file())
            found.append((key, entry_dir.stat().st_mtime, size))
        return found

    def total_bytes(self) -> int:
        return sum(size for _, _, size in self.entries())

    def gc(self, max_bytes: int, pinned: frozenset[str] | set[str] = frozenset()) -> list[str]:
        """Evict least-recently-accessed entries until total size fits.

        Entries referenced by an attestation (``pinned``) are never evicted.
        """
        entries = sorted(self.entries(), key=lambda e: (e[1], e[0]))
        total = sum(size for _, _, size in entries)
        evicted: list[str] = []
        for key, _, size in entries:
            if total <= max_bytes:
                break
            if key in pinned:
                continue
            entry_dir = self._entry_dir(key)
            doomed = entry_dir.with_name(f".{key}.evict-{os.getpid()}-{time.monotonic_ns()}")
            try:
                os.rename(entry_dir, doomed)
            except OSError:
                continue  # concurrently removed
            shutil.rmtree(doomed, ignore_errors=True)
            total -= size
            evicted.append(key)
        return evicted
