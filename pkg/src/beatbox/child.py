"""Child-process harness: runs one user algorithm behind the stdio protocol.

Invoked as ``python -m beatbox.child <source-file>``. The user source must
define an ``Algorithm`` class (``setup``/``process``/``results``) or, for
dataset views, a ``View`` class with ``load``. User ``print`` output is
redirected to stderr so it can never corrupt the protocol stream.
"""
from __future__ import annotations

import sys
import traceback
from collections import namedtuple

from .protocol import ProtocolError, read_message, write_message

Item = namedtuple("Item", "start end value")


class UserCodeError(Exception):
    pass


def _result_kind(value) -> tuple[str, object]:
    if isinstance(value, bool):
        return "bool", value
    if isinstance(value, int):
        return "int64", value
    if isinstance(value, float):
        return "float64", value
    if isinstance(value, str):
        return "string", value
    if isinstance(value, (bytes, bytearray)):
        return "plot", bytes(value).hex()
    raise UserCodeError(f"unsupported result value of type {type(value).__name__}")


class _OutputEmitter:
    """Collects exactly one emission per output endpoint per group."""

    def __init__(self, endpoints: list[str]) -> None:
        self.endpoints = endpoints
        self.pending: dict[str, object] = {}

    def __call__(self, endpoint: str, value) -> None:
        if endpoint not in self.endpoints:
            raise UserCodeError(f"unknown output endpoint {endpoint!r}")
        if endpoint in self.pending:
            raise UserCodeError(f"endpoint {endpoint!r} already written for this group")
        self.pending[endpoint] = value

    def drain(self) -> dict[str, object]:
        missing = [ep for ep in self.endpoints if ep not in self.pending]
        if missing:
            raise UserCodeError(f"no output written for endpoint(s): {', '.join(missing)}")
        out, self.pending = self.pending, {}
        return out


def _load_user_object(source_path: str, is_view: bool):
    with open(source_path, "r", encoding="utf-8") as fh:
        source = fh.read()
    namespace: dict = {}
    exec(compile(source, "<algorithm>", "exec"), namespace)
    cls_name = "View" if is_view else "Algorithm"
    cls = namespace.get(cls_name)
    if cls is None:
        raise UserCodeError(f"source does not define a {cls_name} class")
    return cls()


def _emit_view_items(proto_out, channel: str, entries) -> None:
    index = 0
    for entry in entries:
        if isinstance(entry, tuple) and len(entry) == 3:
            start, end, value = entry
        else:
            start, end, value = index, index + 1, entry
        write_message(
            proto_out,
            {"type": "data", "endpoint": channel, "start": start, "end": end, "value": value},
        )
        index = end


def run(argv: list[str]) -> int:
    proto_in = sys.stdin.buffer
    proto_out = sys.stdout.buffer
    sys.stdout = sys.stderr  # user prints must not touch the protocol stream

    def fail(message: str) -> int:
        write_message(proto_out, {"type": "error", "message": message[-8192:]})
        return 1

    if len(argv) != 2:
        return fail("usage: beatbox.child <source-file>")

    setup = read_message(proto_in)
    if setup is None or setup["type"] != "setup":
        return fail("expected a setup message")

    inputs = {spec["endpoint"]: spec for spec in setup["inputs"]}
    output_endpoints = sorted(spec["endpoint"] for spec in setup["outputs"])
    sync_endpoint = next((ep for ep, spec in inputs.items() if spec.get("sync")), None)
    is_view = not inputs

    try:
        algo = _load_user_object(argv[1], is_view)
        if hasattr(algo, "setup"):
            algo.setup(setup["parameters"])
    except Exception:
        return fail(traceback.format_exc())

    write_message(proto_out, {"type": "ready"})

    buffers: dict[str, list[Item]] = {ep: [] for ep in inputs}
    try:
        while True:
            msg = read_message(proto_in)
            if msg is None:
                return fail("input stream closed before close message")
            if msg["type"] == "data":
                ep = msg["endpoint"]
                if ep not in buffers:
                    return fail(f"data for unknown endpoint {ep!r}")
                buffers[ep].append(Item(msg["start"], msg["end"], msg["value"]))
                if ep == sync_endpoint:
                    group = {name: list(items) for name, items in buffers.items()}
                    emitter = _OutputEmitter(output_endpoints)
                    algo.process(group, emitter)
                    sync_item = buffers[sync_endpoint][-1]
                    for endpoint, value in sorted(emitter.drain().items()):
                        write_message(
                            proto_out,
                            {
                                "type": "data",
                                "endpoint": endpoint,
                                "start": sync_item.start,
                                "end": sync_item.end,
                                "value": value,
                            },
                        )
                    buffers = {ep: [] for ep in inputs}
            elif msg["type"] == "end":
                continue
            elif msg["type"] == "close":
                break
            else:
                return fail(f"unexpected message type {msg['type']!r}")

        if is_view:
            channels = algo.load()
            declared = set(ep for ep in (s["endpoint"] for s in setup["outputs"]))
            if set(channels) != declared:
                raise UserCodeError(
                    f"view channels {sorted(channels)} do not match declared {sorted(declared)}"
                )
            for channel in sorted(channels):
                _emit_view_items(proto_out, channel, channels[channel])
        elif hasattr(algo, "results"):
            for name, value in sorted(algo.results().items()):
                kind, wire_value = _result_kind(value)
                write_message(
                    proto_out,
                    {"type": "result", "name": name, "kind": kind, "value": wire_value},
                )
    except (UserCodeError, ProtocolError):
        return fail(traceback.format_exc())
    except Exception:
        return fail(traceback.format_exc())

    write_message(proto_out, {"type": "done"})
    return 0


def main() -> None:  # pragma: no cover - exercised via subprocess tests
    sys.exit(run(sys.argv))


if __name__ == "__main__":  # pragma: no cover
    main()
