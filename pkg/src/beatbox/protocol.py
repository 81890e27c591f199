"""Stdio wire protocol between the block runner and its child process.

Every message is a 4-byte big-endian unsigned length followed by that many
bytes of canonical JSON. Anything else — oversized frames, truncation,
invalid UTF-8/JSON, unknown or malformed messages — is a protocol error.
"""
from __future__ import annotations

import struct
from typing import Any, BinaryIO

from .canonical import canonical_bytes, canonical_loads

MAX_FRAME_BYTES = 256 * 1024 * 1024

_LENGTH = struct.Struct(">I")

# type -> exact field set (including "type")
PARENT_MESSAGES = {
    "setup": {"type", "block", "parameters", "inputs", "outputs", "max_cores"},
    "data": {"type", "endpoint", "start", "end", "value"},
    "end": {"type", "endpoint"},
    "close": {"type"},
}
CHILD_MESSAGES = {
    "ready": {"type"},
    "data": {"type", "endpoint", "start", "end", "value"},
    "result": {"type", "name", "kind", "value"},
    "done": {"type"},
    "error": {"type", "message"},
}
_ALL_MESSAGES = {**PARENT_MESSAGES, **CHILD_MESSAGES}


class ProtocolError(Exception):
    pass


def validate_message(msg: Any) -> dict:
    if not isinstance(msg, dict):
        raise ProtocolError(f"message must be an object, got {type(msg).__name__}")
    kind = msg.get("type")
    fields = _ALL_MESSAGES.get(kind)
    if fields is None:
        raise ProtocolError(f"unknown message type {kind!r}")
    if set(msg) != fields:
        raise ProtocolError(
            f"message {kind!r} must have exactly fields {sorted(fields)}, got {sorted(msg)}"
        )
    return msg


def encode_message(msg: dict) -> bytes:
    validate_message(msg)
    try:
        body = canonical_bytes(msg)
    except ValueError as exc:
        raise ProtocolError(f"unencodable message: {exc}") from exc
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds the 256 MiB limit")
    return _LENGTH.pack(len(body)) + body


def decode_message(data: bytes) -> dict:
    """Decode exactly one frame; the buffer must contain nothing else."""
    if len(data) < _LENGTH.size:
        raise ProtocolError("truncated frame: missing length prefix")
    (length,) = _LENGTH.unpack(data[: _LENGTH.size])
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds the 256 MiB limit")
    body = data[_LENGTH.size :]
    if len(body) != length:
        raise ProtocolError(f"truncated frame: expected {length} bytes, got {len(body)}")
    return _parse_body(bytes(body))


def _parse_body(body: bytes) -> dict:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"frame is not valid UTF-8: {exc}") from exc
    try:
        msg = canonical_loads(text)
    except ValueError as exc:
        raise ProtocolError(f"frame is not valid JSON: {exc}") from exc
    return validate_message(msg)


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    chunks: list[bytes] = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if not chunks:
                return None
            raise ProtocolError("stream truncated mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(stream: BinaryIO) -> dict | None:
    """Read one framed message; None on clean EOF."""
    header = _read_exact(stream, _LENGTH.size)
    if header is None:
        return None
    (length,) = _LENGTH.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds the 256 MiB limit")
    body = _read_exact(stream, length)
    if body is None:
        raise ProtocolError("stream truncated mid-frame")
    return _parse_body(body)


def write_message(stream: BinaryIO, msg: dict) -> int:
    frame = encode_message(msg)
    stream.write(frame)
    stream.flush()
    return len(frame)
