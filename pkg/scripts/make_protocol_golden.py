#!/usr/bin/env python3
"""Regenerate the committed golden wire-protocol corpus (tests/golden/protocol)."""
from __future__ import annotations

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from beatbox.protocol import encode_message  # noqa: E402

GOLDEN = pathlib.Path(__file__).resolve().parents[1] / "tests" / "golden" / "protocol"

MESSAGES = {
    "setup": {
        "type": "setup",
        "block": "scale",
        "parameters": {"factor": 0.5},
        "inputs": [{"endpoint": "samples", "format": "user/data/1", "sync": True}],
        "outputs": [{"endpoint": "scaled", "format": "user/data/1"}],
        "max_cores": 2,
    },
    "data": {"type": "data", "endpoint": "samples", "start": 0, "end": 1, "value": {"value": 3.5}},
    "end": {"type": "end", "endpoint": "x"},
    "close": {"type": "close"},
    "ready": {"type": "ready"},
    "result": {"type": "result", "name": "mean", "kind": "float64", "value": 9.5},
    "done": {"type": "done"},
    "error": {"type": "error", "message": "division by zero"},
}


def main() -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name, msg in MESSAGES.items():
        path = GOLDEN / f"{name}.bin"
        path.write_bytes(encode_message(msg))
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
