"""Index/duration helpers.

Indices are plain int64 values: nanoseconds since the Unix epoch for
time-indexed series, millimetres of cumulative cast length for
length-indexed series. All buckets are fixed durations aligned to index 0
(no calendars, no timezones).
"""

from __future__ import annotations

import re
from datetime import datetime, timezone

NS_PER_S = 1_000_000_000
NS_PER_MIN = 60 * NS_PER_S
NS_PER_HOUR = 60 * NS_PER_MIN
NS_PER_DAY = 24 * NS_PER_HOUR
NS_PER_WEEK = 7 * NS_PER_DAY

_DURATION_RE = re.compile(r"^\s*(\d+)\s*(ns|us|ms|s|m|h|d|w)\s*$")

_UNIT_NS = {
    "ns": 1,
    "us": 1_000,
    "ms": 1_000_000,
    "s": NS_PER_S,
    "m": NS_PER_MIN,
    "h": NS_PER_HOUR,
    "d": NS_PER_DAY,
    "w": NS_PER_WEEK,
}

_LABELS = {
    NS_PER_MIN: "minutely",
    NS_PER_HOUR: "hourly",
    NS_PER_DAY: "daily",
    NS_PER_WEEK: "weekly",
}


def parse_duration_ns(text: str | int) -> int:
    """Parse a duration like "7d", "1h", "90s" into nanoseconds.

    Bare integers are taken as nanoseconds already.
    """
    if isinstance(text, int):
        return text
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"invalid duration {text!r} (expected e.g. '7d', '1h', '30s')")
    return int(m.group(1)) * _UNIT_NS[m.group(2)]


def parse_timestamp_ns(text: str | int) -> int:
    """Parse an ISO-8601 timestamp or a bare integer into epoch nanoseconds."""
    if isinstance(text, int):
        return text
    stripped = text.strip()
    if re.fullmatch(r"[+-]?\d+", stripped):
        return int(stripped)
    if stripped.endswith("Z"):
        stripped = stripped[:-1] + "+00:00"
    dt = datetime.fromisoformat(stripped)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * NS_PER_S)


def format_timestamp(ns: int) -> str:
    dt = datetime.fromtimestamp(ns / NS_PER_S, tz=timezone.utc)
    return dt.isoformat().replace("+00:00", "Z")


def resolution_label(resolution_ns: int) -> str:
    """Human-friendly label for a bucket resolution ("hourly", "300s", ...)."""
    if resolution_ns in _LABELS:
        return _LABELS[resolution_ns]
    if resolution_ns % NS_PER_S == 0:
        return f"{resolution_ns // NS_PER_S}s"
    return f"{resolution_ns}ns"
