"""Block execution in isolated children: protocol, limits, folds, isolation."""
from __future__ import annotations

import textwrap
import time

import psutil
import pytest

from beatbox.cache import BlockCache, CacheEntry
from beatbox.channels import ChannelData, DataItem
from beatbox.runner import (
    BlockJobDescriptor,
    LimitEnforcer,
    ResourceLimits,
    default_environments,
    merge_fold_entries,
    run_block,
)
from fixtures import FMT_DATA

ENVS = default_environments()
LIMITS = ResourceLimits(max_memory_bytes=512 * 1024 * 1024, max_cores=1, max_wall_seconds=30)

IDENTITY = textwrap.dedent(
    """
    class Algorithm:
        def process(self, inputs, output):
            output("out", inputs["inp"][0].value)
    """
)

SOURCE_KEY = "9" * 64


def seed_input(cache: BlockCache, values: list[float]) -> None:
    items = tuple(DataItem.from_value(i, i + 1, {"value": v}) for i, v in enumerate(values))
    entry = CacheEntry(
        key=SOURCE_KEY,
        outputs={"out": ChannelData(format=FMT_DATA, items=items)},
        experiment="user/exp/1",
        block="src",
        timestamp=0.0,
    )
    cache.put(entry)


def processing_job(source: str, *, limits: ResourceLimits = LIMITS, fold=None, parameters=None) -> BlockJobDescriptor:
    return BlockJobDescriptor(
        experiment="user/exp/1",
        block="step",
        kind="processing",
        algorithm_digest="a" * 64,
        source=source,
        language="python",
        parameters=parameters or {},
        inputs={"inp": (SOURCE_KEY, "out")},
        input_formats={"inp": "user/data/1"},
        outputs={"out": "user/data/1"},
        sync="inp",
        limits=limits,
        environment="python",
        fold=fold,
    )


class TestRunBlock:
    def test_identity_pass_through(self, tmp_path):
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0, 2.0, 3.0])
        job = processing_job(IDENTITY)
        result = run_block(job, cache, ENVS)
        assert result.status == "success", result.message
        entry = cache.get(result.key)
        out = entry.outputs["out"]
        assert len(out.items) == 3
        assert [i.payload for i in out.items] == [
            i.payload for i in cache.get(SOURCE_KEY).outputs["out"].items
        ]
        assert result.stats.bytes_read > 0
        assert result.stats.bytes_written > 0

    def test_parameters_reach_algorithm(self, tmp_path):
        source = textwrap.dedent(
            """
            class Algorithm:
                def setup(self, parameters):
                    self.factor = parameters["factor"]

                def process(self, inputs, output):
                    output("out", {"value": inputs["inp"][0].value["value"] * self.factor})
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [2.0])
        result = run_block(processing_job(source, parameters={"factor": 3.0}), cache, ENVS)
        assert result.status == "success", result.message
        assert cache.get(result.key).outputs["out"].items[0].value == {"value": 6.0}

    def test_malformed_message_is_protocol_error(self, tmp_path):
        source = textwrap.dedent(
            """
            import os

            class Algorithm:
                def process(self, inputs, output):
                    os.write(1, b"this is not a frame")
                    output("out", inputs["inp"][0].value)
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        job = processing_job(source)
        result = run_block(job, cache, ENVS)
        assert result.status == "protocol-error"
        assert not cache.contains(job.cache_key())

    def test_user_exception_is_user_error(self, tmp_path):
        source = textwrap.dedent(
            """
            class Algorithm:
                def process(self, inputs, output):
                    raise RuntimeError("numerical meltdown")
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        result = run_block(processing_job(source), cache, ENVS)
        assert result.status == "user-error"
        assert "numerical meltdown" in result.message

    def test_wall_limit_kills_sleeper(self, tmp_path):
        source = textwrap.dedent(
            """
            import time

            class Algorithm:
                def process(self, inputs, output):
                    time.sleep(10)
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        limits = ResourceLimits(max_memory_bytes=512 * 1024 * 1024, max_cores=1, max_wall_seconds=1)
        started = time.monotonic()
        result = run_block(processing_job(source, limits=limits), cache, ENVS)
        elapsed = time.monotonic() - started
        assert result.status == "limit-exceeded"
        assert result.limit == "wall"
        assert elapsed < 3.0

    def test_memory_limit_kills_hog(self, tmp_path):
        source = textwrap.dedent(
            """
            import time

            class Algorithm:
                def process(self, inputs, output):
                    hog = bytearray(256 * 1024 * 1024)
                    time.sleep(30)
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        limits = ResourceLimits(max_memory_bytes=128 * 1024 * 1024, max_cores=1, max_wall_seconds=25)
        result = run_block(processing_job(source, limits=limits), cache, ENVS)
        assert result.status == "limit-exceeded"
        assert result.limit == "memory"

    def test_no_orphans_after_any_result(self, tmp_path):
        source = textwrap.dedent(
            """
            import subprocess, sys

            class Algorithm:
                def process(self, inputs, output):
                    subprocess.Popen([sys.executable, "-c", "import time; time.sleep(120)"])
                    output("out", inputs["inp"][0].value)
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        result = run_block(processing_job(source), cache, ENVS)
        assert result.status == "success", result.message
        me = psutil.Process()
        lingering = [
            p for p in me.children(recursive=True)
            if "time.sleep(120)" in " ".join(p.cmdline())
        ]
        assert lingering == []

    def test_stderr_captured_and_protocol_clean(self, tmp_path):
        source = textwrap.dedent(
            """
            import sys

            class Algorithm:
                def process(self, inputs, output):
                    print("chatter on stdout")
                    print("warning on stderr", file=sys.stderr)
                    output("out", inputs["inp"][0].value)
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        result = run_block(processing_job(source), cache, ENVS)
        assert result.status == "success", result.message
        assert "chatter on stdout" in result.stderr
        assert "warning on stderr" in result.stderr

    def test_environment_is_scrubbed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SECRET_TOKEN", "hunter2")
        source = textwrap.dedent(
            """
            import os

            class Algorithm:
                def process(self, inputs, output):
                    assert "SECRET_TOKEN" not in os.environ, "leaked env"
                    assert "PATH" in os.environ
                    output("out", inputs["inp"][0].value)
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        result = run_block(processing_job(source), cache, ENVS)
        assert result.status == "success", result.message

    def test_deterministic_entries_across_runs(self, tmp_path):
        entries = []
        for sub in ("one", "two"):
            cache = BlockCache(tmp_path / sub)
            seed_input(cache, [1.0, 2.0])
            job = processing_job(IDENTITY)
            result = run_block(job, cache, ENVS)
            assert result.status == "success"
            entry_dir = cache._entry_dir(result.key)
            entries.append((entry_dir / "out.out.data").read_bytes())
        assert entries[0] == entries[1]

    def test_warm_cache_short_circuits(self, tmp_path):
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        job = processing_job(IDENTITY)
        first = run_block(job, cache, ENVS)
        assert first.status == "success"
        second = run_block(job, cache, ENVS)
        assert second.status == "success" and second.key == first.key

    def test_analyzer_results(self, tmp_path):
        source = textwrap.dedent(
            """
            class Algorithm:
                def setup(self, parameters):
                    self.count = 0

                def process(self, inputs, output):
                    self.count += 1

                def results(self):
                    return {"count": self.count, "label": "ok", "flag": True}
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0, 2.0, 3.0])
        job = BlockJobDescriptor(
            experiment="user/exp/1",
            block="analysis",
            kind="analyzer",
            algorithm_digest="b" * 64,
            source=source,
            language="python",
            parameters={},
            inputs={"inp": (SOURCE_KEY, "out")},
            input_formats={"inp": "user/data/1"},
            outputs={},
            sync="inp",
            limits=LIMITS,
            environment="python",
            results_schema={"count": "int64", "label": "string", "flag": "bool"},
        )
        result = run_block(job, cache, ENVS)
        assert result.status == "success", result.message
        entry = cache.get(result.key)
        assert entry.results == {
            "count": {"kind": "int64", "value": 3},
            "label": {"kind": "string", "value": "ok"},
            "flag": {"kind": "bool", "value": True},
        }

    def test_analyzer_missing_result_rejected(self, tmp_path):
        source = textwrap.dedent(
            """
            class Algorithm:
                def process(self, inputs, output):
                    pass

                def results(self):
                    return {"partial": 1}
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        job = BlockJobDescriptor(
            experiment="user/exp/1",
            block="analysis",
            kind="analyzer",
            algorithm_digest="b" * 64,
            source=source,
            language="python",
            parameters={},
            inputs={"inp": (SOURCE_KEY, "out")},
            input_formats={"inp": "user/data/1"},
            outputs={},
            sync="inp",
            limits=LIMITS,
            environment="python",
            results_schema={"partial": "int64", "missing": "float64"},
        )
        result = run_block(job, cache, ENVS)
        assert result.status == "protocol-error"
        assert "missing" in result.message

    def test_view_loader(self, tmp_path):
        source = textwrap.dedent(
            """
            class View:
                def load(self):
                    return {
                        "samples": [{"value": float(i)} for i in range(4)],
                        "labels": [(0, 2, {"label": 0}), (2, 4, {"label": 1})],
                    }
            """
        )
        cache = BlockCache(tmp_path)
        job = BlockJobDescriptor(
            experiment="user/exp/1",
            block="src",
            kind="dataset",
            algorithm_digest="c" * 64,
            source=source,
            language="python",
            parameters={},
            inputs={},
            input_formats={},
            outputs={"samples": "user/data/1", "labels": "user/label/1"},
            sync=None,
            limits=LIMITS,
            environment="python",
        )
        result = run_block(job, cache, ENVS)
        assert result.status == "success", result.message
        entry = cache.get(result.key)
        assert len(entry.outputs["samples"].items) == 4
        assert len(entry.outputs["labels"].items) == 2
        assert entry.outputs["labels"].items[1].value == {"label": 1}


RAW_EXEC_IDENTITY = """#!/usr/bin/env python3
# Standalone runner speaking the wire protocol with no platform imports:
# doubles as an independent implementation of the child contract.
import json, struct, sys

def read_msg(stream):
    header = stream.read(4)
    if not header:
        return None
    (length,) = struct.unpack(">I", header)
    return json.loads(stream.read(length).decode("utf-8"))

def write_msg(stream, msg):
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    stream.write(struct.pack(">I", len(body)) + body)
    stream.flush()

stdin, stdout = sys.stdin.buffer, sys.stdout.buffer
setup = read_msg(stdin)
assert setup["type"] == "setup"
sync = next(s["endpoint"] for s in setup["inputs"] if s["sync"])
out = setup["outputs"][0]["endpoint"]
write_msg(stdout, {"type": "ready"})
while True:
    msg = read_msg(stdin)
    if msg is None or msg["type"] == "close":
        break
    if msg["type"] == "data" and msg["endpoint"] == sync:
        write_msg(stdout, {"type": "data", "endpoint": out,
                           "start": msg["start"], "end": msg["end"],
                           "value": msg["value"]})
write_msg(stdout, {"type": "done"})
"""


class TestExecEnvironment:
    def test_raw_executable_speaks_the_protocol(self, tmp_path):
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.5, 2.5])
        job = BlockJobDescriptor(
            experiment="user/exp/1",
            block="step",
            kind="processing",
            algorithm_digest="e" * 64,
            source=RAW_EXEC_IDENTITY,
            language="exec",
            parameters={},
            inputs={"inp": (SOURCE_KEY, "out")},
            input_formats={"inp": "user/data/1"},
            outputs={"out": "user/data/1"},
            sync="inp",
            limits=LIMITS,
            environment="exec",
        )
        result = run_block(job, cache, ENVS)
        assert result.status == "success", result.message
        entry = cache.get(result.key)
        assert [i.value for i in entry.outputs["out"].items] == [
            {"value": 1.5},
            {"value": 2.5},
        ]

    def test_language_environment_mismatch(self, tmp_path):
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        job = processing_job(IDENTITY)
        mismatched = BlockJobDescriptor.from_doc({**job.to_doc(), "language": "exec"})
        result = run_block(mismatched, cache, ENVS)
        assert result.status == "crashed"
        assert "does not support language" in result.message


class TestPlotResults:
    def test_analyzer_plot_round_trips_as_hex(self, tmp_path):
        one_pixel_png = bytes.fromhex(
            "89504e470d0a1a0a0000000d49484452000000010000000108060000001f15c489"
            "0000000d4944415478da63fcffff3f030005fe02fea72d267d0000000049454e44ae426082"
        )
        source = textwrap.dedent(
            f"""
            class Algorithm:
                def process(self, inputs, output):
                    pass

                def results(self):
                    return {{"curve": bytes.fromhex("{one_pixel_png.hex()}"), "n": 1}}
            """
        )
        cache = BlockCache(tmp_path)
        seed_input(cache, [1.0])
        job = BlockJobDescriptor(
            experiment="user/exp/1",
            block="analysis",
            kind="analyzer",
            algorithm_digest="d" * 64,
            source=source,
            language="python",
            parameters={},
            inputs={"inp": (SOURCE_KEY, "out")},
            input_formats={"inp": "user/data/1"},
            outputs={},
            sync="inp",
            limits=LIMITS,
            environment="python",
            results_schema={"curve": "plot", "n": "int64"},
        )
        result = run_block(job, cache, ENVS)
        assert result.status == "success", result.message
        entry = cache.get(result.key)
        assert entry.results["curve"] == {"kind": "plot", "value": one_pixel_png.hex()}
        assert entry.results["n"] == {"kind": "int64", "value": 1}


class TestFoldExecution:
    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_fold_merge_equals_sequential(self, tmp_path, n):
        # The fold-equivalence oracle at executor level: run sequentially in
        # one cache, run n fold jobs plus merge in another, compare bytes.
        source = textwrap.dedent(
            """
            class Algorithm:
                def process(self, inputs, output):
                    output("out", {"value": inputs["inp"][0].value["value"] * 2.0})
            """
        )
        values = [float(i) for i in range(10)]

        seq_cache = BlockCache(tmp_path / "seq")
        seed_input(seq_cache, values)
        seq_job = processing_job(source)
        seq = run_block(seq_job, seq_cache, ENVS)
        assert seq.status == "success"
        seq_bytes = (seq_cache._entry_dir(seq.key) / "out.out.data").read_bytes()

        fold_cache = BlockCache(tmp_path / f"fold{n}")
        seed_input(fold_cache, values)
        fold_keys = []
        for i in range(n):
            fold_job = processing_job(source, fold=(i, n))
            result = run_block(fold_job, fold_cache, ENVS)
            assert result.status == "success", result.message
            fold_keys.append(result.key)
        merged = merge_fold_entries(fold_cache, processing_job(source), fold_keys)
        assert merged.status == "success"
        assert merged.key == seq.key  # same content address as sequential
        merged_bytes = (fold_cache._entry_dir(merged.key) / "out.out.data").read_bytes()
        assert merged_bytes == seq_bytes


class TestLimitEnforcer:
    def test_completed_child_not_flagged(self):
        import subprocess
        import sys

        for _ in range(100):
            child = subprocess.Popen([sys.executable, "-c", "pass"], start_new_session=True)
            enforcer = LimitEnforcer(
                child,
                ResourceLimits(max_memory_bytes=10**9, max_cores=1, max_wall_seconds=60),
                interval=0.001,
            )
            child.wait()
            enforcer.stop()
            assert enforcer.poll() is None
