"""Canonical JSON serialization and content digests.

Every persisted document, wire message, and cache key in the platform is
derived from one bit-exact serialization so that digests computed in any
process, on any platform, agree:

- object keys sorted by their UTF-8 bytes
- no insignificant whitespace
- integers in minimal decimal form
- floats in shortest round-trip decimal form, lowercase ``e``, no ``+`` or
  leading zeros in the exponent
- strings NFC-normalized
- binary data rendered as lowercase hex strings
"""
from __future__ import annotations

import hashlib
import json
import math
import unicodedata
from typing import Any


class CanonicalizationError(ValueError):
    """Raised for values that have no canonical JSON form."""


def _canonical_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise CanonicalizationError(f"non-finite float {x!r} has no canonical form")
    text = repr(x)  # shortest round-trip decimal
    if "e" in text:
        mantissa, exponent = text.split("e")
        sign = "-" if exponent.startswith("-") else ""
        digits = exponent.lstrip("+-").lstrip("0") or "0"
        text = f"{mantissa}e{sign}{digits}"
    return text


def _normalize(value: Any) -> Any:
    """Return ``value`` with strings NFC-normalized and bytes hex-encoded."""
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value)
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value).hex()
    if isinstance(value, bool) or value is None or isinstance(value, int):
        return value
    if isinstance(value, float):
        return value
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise CanonicalizationError(f"object key {k!r} is not a string")
            out[unicodedata.normalize("NFC", k)] = _normalize(v)
        return out
    raise CanonicalizationError(f"value of type {type(value).__name__} has no canonical form")


def _emit(value: Any, parts: list[str]) -> None:
    if value is None:
        parts.append("null")
    elif value is True:
        parts.append("true")
    elif value is False:
        parts.append("false")
    elif isinstance(value, int):
        parts.append(str(value))
    elif isinstance(value, float):
        parts.append(_canonical_float(value))
    elif isinstance(value, str):
        parts.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, list):
        parts.append("[")
        for i, item in enumerate(value):
            if i:
                parts.append(",")
            _emit(item, parts)
        parts.append("]")
    elif isinstance(value, dict):
        parts.append("{")
        for i, key in enumerate(sorted(value, key=lambda k: k.encode("utf-8"))):
            if i:
                parts.append(",")
            parts.append(json.dumps(key, ensure_ascii=False))
            parts.append(":")
            _emit(value[key], parts)
        parts.append("}")
    else:  # pragma: no cover - _normalize rejects these first
        raise CanonicalizationError(f"cannot emit {type(value).__name__}")


def canonical_dumps(value: Any) -> str:
    """Serialize ``value`` to its canonical JSON text."""
    parts: list[str] = []
    _emit(_normalize(value), parts)
    return "".join(parts)


def canonical_bytes(value: Any) -> bytes:
    """Serialize ``value`` to canonical UTF-8 bytes."""
    return canonical_dumps(value).encode("utf-8")


def canonical_digest(value: Any) -> str:
    """Lowercase hex SHA-256 of the canonical serialization of ``value``."""
    return hashlib.sha256(canonical_bytes(value)).hexdigest()


def _reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate object key {key!r}")
        out[key] = value
    return out


def canonical_loads(text: str | bytes) -> Any:
    """Parse JSON text; inverse of :func:`canonical_dumps` for canonical input.

    Duplicate object keys are rejected: canonical documents cannot contain
    them, and silently keeping the last occurrence would mask authoring
    mistakes (e.g. a format declaring the same field twice).
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    return json.loads(text, object_pairs_hook=_reject_duplicate_keys)
