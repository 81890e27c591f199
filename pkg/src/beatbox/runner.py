"""Runs one block job in an isolated child process with resource limits.

The runner owns the child exclusively: it streams synchronized input groups
over stdin, collects outputs/results from stdout, samples memory and wall
clock, and publishes a complete cache entry only on success. Children are
always reaped and never outlive the call.
"""
from __future__ import annotations

import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import psutil

from .cache import BlockCache, CacheEntry, ExecutionStats, compute_cache_key
from .canonical import canonical_bytes
from .channels import ChannelData, ChannelError, DataItem, IndexRange, ensure_full, merge_folds, synchronize
from .model import ObjectRef
from .protocol import ProtocolError, read_message, write_message

STDERR_CAP = 64 * 1024
ENV_ALLOWLIST = ("PATH", "HOME", "TMPDIR")


@dataclass(frozen=True)
class ResourceLimits:
    max_memory_bytes: int
    max_cores: int
    max_wall_seconds: int

    def __post_init__(self) -> None:
        if min(self.max_memory_bytes, self.max_cores, self.max_wall_seconds) <= 0:
            raise ValueError("resource limits must be positive")

    def to_doc(self) -> dict:
        return {
            "max_memory_bytes": self.max_memory_bytes,
            "max_cores": self.max_cores,
            "max_wall_seconds": self.max_wall_seconds,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> ResourceLimits:
        return cls(
            max_memory_bytes=int(doc["max_memory_bytes"]),
            max_cores=int(doc["max_cores"]),
            max_wall_seconds=int(doc["max_wall_seconds"]),
        )


@dataclass(frozen=True)
class EnvironmentDescriptor:
    """Command template starting a runner child for a language tag."""

    name: str
    command: tuple[str, ...]
    languages: frozenset[str]

    def __post_init__(self) -> None:
        if not self.command:
            raise ValueError("environment command template must be non-empty")

    def to_doc(self) -> dict:
        return {"name": self.name, "command": list(self.command), "languages": sorted(self.languages)}

    @classmethod
    def from_doc(cls, doc: dict) -> EnvironmentDescriptor:
        return cls(
            name=doc["name"],
            command=tuple(doc["command"]),
            languages=frozenset(doc.get("languages", [])),
        )


def default_environments() -> dict[str, EnvironmentDescriptor]:
    """Built-ins: a Python script runner and a raw-executable runner."""
    return {
        "python": EnvironmentDescriptor(
            name="python",
            command=(sys.executable, "-m", "beatbox.child", "{source}"),
            languages=frozenset({"python"}),
        ),
        "exec": EnvironmentDescriptor(
            name="exec",
            command=("{source}",),
            languages=frozenset({"exec"}),
        ),
    }


@dataclass(frozen=True)
class BlockJobDescriptor:
    """Everything a worker needs to execute one block (or block fold)."""

    experiment: str
    block: str
    kind: str  # dataset | processing | analyzer
    algorithm_digest: str
    source: str
    language: str
    parameters: dict[str, Any]
    inputs: dict[str, tuple[str, str]]  # endpoint -> (upstream key, upstream endpoint)
    input_formats: dict[str, str]
    outputs: dict[str, str]  # endpoint -> format ref
    sync: str | None
    limits: ResourceLimits
    environment: str
    fold: tuple[int, int] | None = None
    results_schema: dict[str, str] = field(default_factory=dict)

    def cache_key(self) -> str:
        return compute_cache_key(
            self.algorithm_digest, self.parameters, self.environment, self.inputs, self.fold
        )

    def to_doc(self) -> dict:
        return {
            "experiment": self.experiment,
            "block": self.block,
            "kind": self.kind,
            "algorithm_digest": self.algorithm_digest,
            "source": self.source,
            "language": self.language,
            "parameters": self.parameters,
            "inputs": {ep: {"key": k, "output": out} for ep, (k, out) in self.inputs.items()},
            "input_formats": self.input_formats,
            "outputs": self.outputs,
            "sync": self.sync,
            "limits": self.limits.to_doc(),
            "environment": self.environment,
            "fold": list(self.fold) if self.fold else None,
            "results_schema": self.results_schema,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> BlockJobDescriptor:
        fold = doc.get("fold")
        return cls(
            experiment=doc["experiment"],
            block=doc["block"],
            kind=doc["kind"],
            algorithm_digest=doc["algorithm_digest"],
            source=doc["source"],
            language=doc["language"],
            parameters=dict(doc.get("parameters", {})),
            inputs={ep: (v["key"], v["output"]) for ep, v in doc.get("inputs", {}).items()},
            input_formats=dict(doc.get("input_formats", {})),
            outputs=dict(doc.get("outputs", {})),
            sync=doc.get("sync"),
            limits=ResourceLimits.from_doc(doc["limits"]),
            environment=doc["environment"],
            fold=(fold[0], fold[1]) if fold else None,
            results_schema=dict(doc.get("results_schema", {})),
        )


@dataclass(frozen=True)
class RunnerResult:
    status: str  # success | user-error | limit-exceeded | protocol-error | crashed | cancelled
    limit: str | None = None  # wall | memory, when limit-exceeded
    key: str | None = None
    stderr: str = ""
    message: str = ""
    stats: ExecutionStats = field(default_factory=ExecutionStats)

    def to_doc(self) -> dict:
        return {
            "status": self.status,
            "limit": self.limit,
            "key": self.key,
            "stderr": self.stderr,
            "message": self.message,
            "stats": self.stats.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> RunnerResult:
        return cls(
            status=doc["status"],
            limit=doc.get("limit"),
            key=doc.get("key"),
            stderr=doc.get("stderr", ""),
            message=doc.get("message", ""),
            stats=ExecutionStats.from_doc(doc.get("stats", {})),
        )


class LimitEnforcer:
    """Samples a child's wall clock and memory, killing on violation.

    Wall time is checked every poll (well under the 2 s kill bound); memory
    is sampled at the same cadence over the whole process group.
    """

    def __init__(
        self,
        process: subprocess.Popen,
        limits: ResourceLimits,
        interval: float = 0.1,
        clock=time.monotonic,
        cancel_event: threading.Event | None = None,
    ) -> None:
        self.process = process
        self.limits = limits
        self.interval = interval
        self.clock = clock
        self.cancel_event = cancel_event
        self.started = clock()
        self.reason: str | None = None
        self.peak_memory = 0
        self.cpu_seconds = 0.0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _sample(self) -> str | None:
        if self.cancel_event is not None and self.cancel_event.is_set():
            return "cancelled"
        if self.clock() - self.started > self.limits.max_wall_seconds:
            return "wall"
        try:
            root = psutil.Process(self.process.pid)
            procs = [root] + root.children(recursive=True)
            rss = 0
            cpu = 0.0
            for p in procs:
                try:
                    rss += p.memory_info().rss
                    times = p.cpu_times()
                    cpu += times.user + times.system
                except psutil.Error:
                    continue
            self.peak_memory = max(self.peak_memory, rss)
            self.cpu_seconds = max(self.cpu_seconds, cpu)
            if rss > self.limits.max_memory_bytes:
                return "memory"
        except psutil.Error:
            pass  # child already gone; no violation
        return None

    def _loop(self) -> None:
        while not self._stop.is_set():
            if self.process.poll() is not None:
                return
            violation = self._sample()
            if violation is not None and self.process.poll() is None:
                self.reason = violation
                kill_tree(self.process)
                return
            self._stop.wait(self.interval)

    def poll(self) -> str | None:
        """Termination reason so far, or None while running within limits."""
        return self.reason

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


def kill_tree(process: subprocess.Popen) -> None:
    """Kill the child's whole process group (it is a session leader)."""
    try:
        os.killpg(process.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        try:
            process.kill()
        except OSError:
            pass


def _child_env() -> dict[str, str]:
    return {name: os.environ[name] for name in ENV_ALLOWLIST if name in os.environ}


def _stderr_reader(stream, sink: list[bytes]) -> None:
    collected = 0
    while True:
        chunk = stream.read(8192)
        if not chunk:
            return
        if collected < STDERR_CAP:
            sink.append(chunk[: STDERR_CAP - collected])
            collected += len(chunk)


def _fold_slice(total: int, fold: tuple[int, int]) -> tuple[int, int]:
    """(offset, size) of fold i of n over `total` items; larger runs first."""
    i, n = fold
    if not 0 <= i < n:
        raise ValueError(f"fold index {i} out of range for {n} folds")
    if n > total:
        raise ChannelError(f"cannot split {total} items into {n} folds")
    base, extra = divmod(total, n)
    offset = i * base + min(i, extra)
    size = base + (1 if i < extra else 0)
    return offset, size


def _load_inputs(job: BlockJobDescriptor, cache: BlockCache) -> dict[str, ChannelData]:
    channels: dict[str, ChannelData] = {}
    for endpoint, (upstream_key, upstream_endpoint) in job.inputs.items():
        entry = cache.get(upstream_key)
        if entry is None:
            raise FileNotFoundError(f"input cache entry {upstream_key} missing for {endpoint}")
        channel = entry.outputs.get(upstream_endpoint)
        if channel is None:
            raise KeyError(f"cache entry {upstream_key} has no output {upstream_endpoint!r}")
        channels[endpoint] = ensure_full(channel)
    return channels


def _setup_message(job: BlockJobDescriptor) -> dict:
    return {
        "type": "setup",
        "block": job.block,
        "parameters": job.parameters,
        "inputs": [
            {"endpoint": ep, "format": job.input_formats.get(ep, ""), "sync": ep == job.sync}
            for ep in sorted(job.inputs)
        ],
        "outputs": [{"endpoint": ep, "format": fmt} for ep, fmt in sorted(job.outputs.items())],
        "max_cores": job.limits.max_cores,
    }


class _GroupWriter(threading.Thread):
    """Streams data/end/close to the child; reader runs concurrently."""

    def __init__(self, stdin, groups, sync: str | None, endpoints: list[str]) -> None:
        super().__init__(daemon=True)
        self.stdin = stdin
        self.groups = groups
        self.sync = sync
        self.endpoints = endpoints
        self.bytes_sent = 0
        self.failed: Exception | None = None

    def run(self) -> None:
        try:
            for group in self.groups:
                ordered = sorted(ep for ep in group.items if ep != self.sync)
                if self.sync is not None:
                    ordered.append(self.sync)
                for endpoint in ordered:
                    for item in group.items[endpoint]:
                        value = item.value
                        self.bytes_sent += len(item.payload)
                        write_message(
                            self.stdin,
                            {
                                "type": "data",
                                "endpoint": endpoint,
                                "start": item.range.start,
                                "end": item.range.end,
                                "value": value,
                            },
                        )
            for endpoint in sorted(self.endpoints):
                write_message(self.stdin, {"type": "end", "endpoint": endpoint})
            write_message(self.stdin, {"type": "close"})
            self.stdin.close()
        except (BrokenPipeError, OSError, ValueError) as exc:
            self.failed = exc


def run_block(
    job: BlockJobDescriptor,
    cache: BlockCache,
    environments: dict[str, EnvironmentDescriptor],
    *,
    poll_interval: float = 0.1,
    cancel_event: threading.Event | None = None,
) -> RunnerResult:
    """Execute one block job; puts a cache entry and reports the outcome."""
    key = job.cache_key()
    if cache.contains(key):  # idempotent re-execution after requeue
        return RunnerResult(status="success", key=key)

    env_descriptor = environments.get(job.environment)
    if env_descriptor is None:
        return RunnerResult(status="crashed", message=f"unknown environment {job.environment!r}")
    if job.language not in env_descriptor.languages:
        return RunnerResult(
            status="crashed",
            message=f"environment {job.environment!r} does not support language {job.language!r}",
        )

    try:
        channels = _load_inputs(job, cache)
    except Exception as exc:
        return RunnerResult(status="crashed", message=f"input load failed: {exc}")

    groups = synchronize(channels, job.sync) if channels else []
    if job.fold is not None:
        offset, size = _fold_slice(len(groups), job.fold)
        groups = groups[offset : offset + size]
    expected_ranges = [g.range for g in groups]

    source_file = tempfile.NamedTemporaryFile(
        "w", suffix=".py" if job.language == "python" else "", delete=False, encoding="utf-8"
    )
    with source_file:
        source_file.write(job.source)
    os.chmod(source_file.name, 0o700)
    command = [part.replace("{source}", source_file.name) for part in env_descriptor.command]

    stderr_chunks: list[bytes] = []
    received: dict[str, list[DataItem]] = {ep: [] for ep in job.outputs}
    results: dict[str, dict] = {}
    bytes_written = 0
    error_message: str | None = None
    protocol_problem: str | None = None
    done = False

    try:
        try:
            child = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                env=_child_env(),
                start_new_session=True,
            )
        except OSError as exc:
            return RunnerResult(status="crashed", message=f"failed to start runner: {exc}")

        enforcer = LimitEnforcer(child, job.limits, interval=poll_interval, cancel_event=cancel_event)
        stderr_thread = threading.Thread(
            target=_stderr_reader, args=(child.stderr, stderr_chunks), daemon=True
        )
        stderr_thread.start()

        writer: _GroupWriter | None = None
        try:
            write_message(child.stdin, _setup_message(job))
            first = read_message(child.stdout)
            if first is None:
                protocol_problem = "child exited before ready"
            elif first["type"] == "error":
                error_message = first["message"]
            elif first["type"] != "ready":
                protocol_problem = f"expected ready, got {first['type']!r}"
            else:
                writer = _GroupWriter(child.stdin, groups, job.sync, sorted(job.inputs))
                writer.start()
                while True:
                    msg = read_message(child.stdout)
                    if msg is None:
                        break
                    if msg["type"] == "data":
                        endpoint = msg["endpoint"]
                        if endpoint not in received:
                            protocol_problem = f"data for undeclared endpoint {endpoint!r}"
                            break
                        try:
                            item = DataItem(
                                range=IndexRange(msg["start"], msg["end"]),
                                payload=canonical_bytes(msg["value"]),
                            )
                        except (ChannelError, ValueError) as exc:
                            protocol_problem = f"bad output item: {exc}"
                            break
                        received[endpoint].append(item)
                        bytes_written += len(item.payload)
                    elif msg["type"] == "result":
                        results[msg["name"]] = {"kind": msg["kind"], "value": msg["value"]}
                    elif msg["type"] == "error":
                        error_message = msg["message"]
                        break
                    elif msg["type"] == "done":
                        done = True
                        break
                    else:
                        protocol_problem = f"unexpected child message {msg['type']!r}"
                        break
        except (ProtocolError, BrokenPipeError, OSError) as exc:
            protocol_problem = protocol_problem or str(exc)

        if protocol_problem or error_message:
            kill_tree(child)
        try:
            child.wait(timeout=10)
        except subprocess.TimeoutExpired:
            kill_tree(child)
            child.wait(timeout=10)
        kill_tree(child)  # reap any stragglers left in the process group
        enforcer.stop()
        stderr_thread.join(timeout=5)
        if writer is not None:
            writer.join(timeout=5)
        for stream in (child.stdin, child.stdout, child.stderr):
            try:
                if stream:
                    stream.close()
            except OSError:
                pass
    finally:
        try:
            os.unlink(source_file.name)
        except OSError:
            pass

    stderr_text = b"".join(stderr_chunks)[:STDERR_CAP].decode("utf-8", "replace")
    stats = ExecutionStats(
        cpu_seconds=enforcer.cpu_seconds,
        peak_memory_bytes=enforcer.peak_memory,
        bytes_read=writer.bytes_sent if writer else 0,
        bytes_written=bytes_written,
    )

    if enforcer.reason == "cancelled":
        return RunnerResult(status="cancelled", stderr=stderr_text, stats=stats, message="job cancelled")
    if enforcer.reason is not None:
        return RunnerResult(
            status="limit-exceeded", limit=enforcer.reason, stderr=stderr_text, stats=stats,
            message=f"{enforcer.reason} limit exceeded",
        )
    if error_message is not None:
        return RunnerResult(status="user-error", stderr=stderr_text, message=error_message, stats=stats)
    if protocol_problem is not None:
        return RunnerResult(status="protocol-error", stderr=stderr_text, message=protocol_problem, stats=stats)
    if not done:
        return RunnerResult(
            status="crashed", stderr=stderr_text, stats=stats,
            message=f"child exited with code {child.returncode} before done",
        )

    try:
        entry = _assemble_entry(job, key, expected_ranges, received, results, stats)
    except ValueError as exc:
        return RunnerResult(status="protocol-error", stderr=stderr_text, message=str(exc), stats=stats)

    try:
        cache.put(entry)
    except Exception as exc:
        return RunnerResult(status="crashed", stderr=stderr_text, message=f"cache put failed: {exc}", stats=stats)
    return RunnerResult(status="success", key=key, stderr=stderr_text, stats=stats)


def _assemble_entry(
    job: BlockJobDescriptor,
    key: str,
    expected_ranges: list[IndexRange],
    received: dict[str, list[DataItem]],
    results: dict[str, dict],
    stats: ExecutionStats,
) -> CacheEntry:
    outputs: dict[str, ChannelData] = {}
    if job.kind == "dataset":
        ends = set()
        for endpoint, fmt in job.outputs.items():
            channel = ensure_full(
                ChannelData(format=ObjectRef.parse("format", fmt), items=tuple(received[endpoint]))
            )
            if not channel.items:
                raise ValueError(f"view produced no items on channel {endpoint!r}")
            ends.add(channel.end)
            outputs[endpoint] = channel
        if len(ends) > 1:
            raise ValueError(f"view channels cover different index spaces: {sorted(ends)}")
    elif job.kind == "processing":
        for endpoint, fmt in job.outputs.items():
            items = received[endpoint]
            got = [it.range for it in items]
            if got != expected_ranges:
                raise ValueError(
                    f"output {endpoint!r} not synchronized to the sync channel: "
                    f"expected {len(expected_ranges)} items, got {len(got)}"
                )
            outputs[endpoint] = ChannelData(format=ObjectRef.parse("format", fmt), items=tuple(items))
    else:  # analyzer
        schema = job.results_schema
        missing = sorted(set(schema) - set(results))
        if missing:
            raise ValueError(f"analyzer missing declared result(s): {', '.join(missing)}")
        for name, payload in results.items():
            declared = schema.get(name)
            if declared is not None and payload["kind"] != declared:
                raise ValueError(
                    f"result {name!r} has kind {payload['kind']!r}, declared {declared!r}"
                )

    return CacheEntry(
        key=key,
        outputs=outputs,
        results=results,
        stats=stats,
        experiment=job.experiment,
        block=job.block,
        timestamp=time.time(),
    )


def merge_fold_entries(
    cache: BlockCache,
    job: BlockJobDescriptor,
    fold_keys: list[str],
) -> RunnerResult:
    """Combine per-fold cache entries into the block's sequential entry."""
    final_key = job.cache_key()
    if cache.contains(final_key):
        return RunnerResult(status="success", key=final_key)
    per_endpoint: dict[str, list] = {ep: [] for ep in job.outputs}
    for fold_key in fold_keys:
        entry = cache.get(fold_key)
        if entry is None:
            return RunnerResult(status="crashed", message=f"missing fold entry {fold_key}")
        for endpoint in job.outputs:
            per_endpoint[endpoint].append(entry.outputs[endpoint].items)
    outputs = {}
    try:
        for endpoint, fmt in job.outputs.items():
            merged = merge_folds(ObjectRef.parse("format", fmt), per_endpoint[endpoint])
            outputs[endpoint] = ensure_full(merged)
    except ChannelError as exc:
        return RunnerResult(status="crashed", message=f"fold merge failed: {exc}")
    entry = CacheEntry(
        key=final_key,
        outputs=outputs,
        experiment=job.experiment,
        block=job.block,
        timestamp=time.time(),
    )
    try:
        cache.put(entry)
    except Exception as exc:
        return RunnerResult(status="crashed", message=f"cache put failed: {exc}")
    return RunnerResult(status="success", key=final_key)
