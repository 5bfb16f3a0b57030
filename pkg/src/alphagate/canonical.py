"""Canonical serialization and hashing.

All persisted documents go through one serializer so that equal inputs give
byte-equal artifacts: keys sorted, floats at 17 significant digits, ASCII
only, Z-suffixed UTC timestamps. Hashes are SHA-256 over the canonical
text.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from datetime import date, datetime, timezone

__all__ = [
    "canonical_json",
    "sha256_hex",
    "doc_hash",
    "parse_timestamp",
    "format_timestamp",
    "midnight_utc",
    "as_utc",
]


_FRACTION = re.compile(r"\.(\d{1,6})(?=$|[+-])")


def _encode(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(repr(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite float not serializable: {obj!r}")
        text = format(obj, ".17g")
        # keep the value a float on round-trip
        if not any(c in text for c in ".eE"):
            text += ".0"
        out.append(text)
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, datetime):
        out.append(json.dumps(format_timestamp(obj)))
    elif isinstance(obj, dict):
        out.append("{")
        first = True
        for key in sorted(obj):
            if not isinstance(key, str):
                raise ValueError(f"non-string key not serializable: {key!r}")
            if not first:
                out.append(",")
            first = False
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise ValueError(f"type not serializable canonically: {type(obj).__name__}")


def canonical_json(doc) -> str:
    """Serialize a document deterministically (sorted keys, .17g floats)."""
    out: list[str] = []
    _encode(doc, out)
    return "".join(out)


def sha256_hex(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return hashlib.sha256(text).hexdigest()


def doc_hash(doc) -> str:
    """SHA-256 over the canonical JSON of a document."""
    return sha256_hex(canonical_json(doc))


def parse_timestamp(raw: str) -> datetime:
    """Parse an ISO-8601 timestamp into an aware UTC datetime.

    Accepts a 'Z' suffix, explicit offsets, or naive values (taken as UTC).
    """
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    match = _FRACTION.search(text)
    if match:
        # fromisoformat before 3.11 needs exactly 3 or 6 fractional digits
        digits = match.group(1)
        text = text[:match.start(1)] + digits.ljust(6, "0") + text[match.end(1):]
    ts = datetime.fromisoformat(text)
    return as_utc(ts)


def as_utc(ts: datetime) -> datetime:
    """Normalize a datetime to aware UTC; naive values are taken as UTC."""
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    """Render an aware datetime as Z-suffixed ISO-8601 (UTC, trimmed fraction)."""
    ts = as_utc(ts)
    if ts.microsecond:
        base = ts.strftime("%Y-%m-%dT%H:%M:%S.%f").rstrip("0")
        return base + "Z"
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def midnight_utc(day: date) -> datetime:
    return datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
