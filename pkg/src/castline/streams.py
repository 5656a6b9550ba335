"""Newline-delimited record streaming for query responses.

Every stream is exactly one header record, zero or more data records, and
one footer record carrying the emitted count and a completion status, so a
consumer can process records as they arrive and still detect truncation.
Records are encoded lazily and flushed in batches; peak record buffering
is one batch regardless of result size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from castline.store import DataBlock


@dataclass
class StreamStats:
    """Instrumentation for the streaming invariants (bounded buffering)."""

    flushes: int = 0
    max_batch_records: int = 0
    records_emitted: int = 0
    producer_finished: bool = False


def _line(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def encode_stream(header: dict, rows: Iterable[dict], record_type: str = "point",
                  cursor: Optional[str] = None, batch_size: int = 1000,
                  stats: Optional[StreamStats] = None) -> Iterator[bytes]:
    """Encode one response envelope; yields wire chunks of <= batch_size records."""
    stats = stats if stats is not None else StreamStats()
    yield _line({"type": "header", **header})
    buffer: list[bytes] = []
    count = 0
    status = "complete"
    error: Optional[str] = None

    def flush() -> bytes:
        stats.flushes += 1
        stats.max_batch_records = max(stats.max_batch_records, len(buffer))
        chunk = b"".join(buffer)
        buffer.clear()
        return chunk

    try:
        for row in rows:
            buffer.append(_line({"type": record_type, **row}))
            count += 1
            stats.records_emitted = count
            if len(buffer) >= batch_size:
                yield flush()
        stats.producer_finished = True
    except Exception as exc:  # surface mid-stream failures in the footer
        status = "error"
        error = f"{type(exc).__name__}: {exc}"
    if buffer:
        yield flush()
    if status != "error" and cursor is not None:
        status = "truncated"
    footer: dict = {"type": "footer", "count": count, "status": status}
    if cursor is not None:
        footer["cursor"] = cursor
    if error is not None:
        footer["error"] = error
    yield _line(footer)


def block_rows(block: DataBlock) -> Iterator[dict]:
    """Lazily convert a columnar block into wire records."""
    columns = [(name, col) for name, col in block.columns.items()]
    for i in range(len(block)):
        values = {}
        for name, col in columns:
            if col.mask[i]:
                v = col.values[i]
                values[name] = v.item() if hasattr(v, "item") else v
        yield {"i": int(block.index[i]), "v": values}


def decode_stream(lines: Iterable[bytes | str]) -> tuple[dict, list[dict], dict]:
    """Parse a full envelope; enforces the one-header-one-footer contract."""
    header = None
    footer = None
    rows: list[dict] = []
    for raw in lines:
        if isinstance(raw, bytes):
            raw = raw.decode()
        raw = raw.strip()
        if not raw:
            continue
        record = json.loads(raw)
        kind = record.pop("type", None)
        if kind == "header":
            if header is not None:
                raise ValueError("stream carries more than one header")
            header = record
        elif kind == "footer":
            if footer is not None:
                raise ValueError("stream carries more than one footer")
            footer = record
        else:
            rows.append(record)
    if header is None or footer is None:
        raise ValueError("stream is missing its header or footer")
    if footer["count"] != len(rows):
        raise ValueError(f"footer count {footer['count']} != records received {len(rows)}")
    return header, rows, footer
