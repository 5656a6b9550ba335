"""Zero-copy federation of external timeseries sources.

A logical series can be composed from index-disjoint segments, each served
by a connector (built-in kinds: "native" for the local store, "csv-file"
for legacy files). Queries are routed per segment and concatenated; the
result is indistinguishable from a single-store query over the union of
the data. Nothing is ever copied into the native store.

CSV contract: header row ``index,<channel>,...``; the index column holds
ISO-8601 UTC timestamps or integer nanoseconds; empty cells are nulls;
unparseable rows are an error (legacy data problems must surface), not
skipped.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from castline import errors
from castline.model import AggregateFunction, IndexRange, Registry, SeriesSchema, ValueType
from castline.store import (
    Column,
    DataBlock,
    MAX_QUERY_LIMIT,
    QueryResult,
    QuerySpec,
    Store,
    decode_cursor,
    encode_cursor,
    _DTYPE,
    _FILL,
    _generic_bucket,
    _numeric_bucket,
    _range_slice,
)
from castline.timeutil import parse_timestamp_ns


class Connector:
    """Minimal connector contract: ordered half-open range queries.

    Aggregation and paging are optional capabilities; the federation layer
    compensates locally when a connector lacks them.
    """

    capabilities = {"rangeQuery": True, "aggregation": False, "paging": False}

    def fetch(self, index_range: IndexRange, channels: Optional[list[str]]) -> DataBlock:
        raise NotImplementedError


class NativeConnector(Connector):
    capabilities = {"rangeQuery": True, "aggregation": True, "paging": True}

    def __init__(self, store: Store, series_id: str):
        self.store = store
        self.series_id = series_id

    def fetch(self, index_range: IndexRange, channels: Optional[list[str]]) -> DataBlock:
        return self.store.snapshot_block(self.series_id, index_range, channels)

    def aggregate(self, index_range: IndexRange, resolution_ns: int,
                  function: AggregateFunction, channels: Optional[list[str]]) -> DataBlock:
        return self.store.aggregate_query(self.series_id, index_range, resolution_ns,
                                          function, channels)


class CsvConnector(Connector):
    """Read-only file connector; the whole file is parsed and validated at
    bind time so legacy format errors surface immediately."""

    def __init__(self, path: str | Path, schema: SeriesSchema):
        self.path = Path(path)
        self.schema = schema
        if not self.path.exists():
            raise errors.ConnectorInitFailure(f"csv file {self.path} does not exist")
        try:
            self._index, self._columns = self._parse()
        except errors.ConnectorInitFailure:
            raise
        except OSError as exc:
            raise errors.ConnectorInitFailure(f"cannot read {self.path}: {exc}") from exc

    def _parse(self) -> tuple[np.ndarray, dict[str, Column]]:
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise errors.ConnectorInitFailure(f"{self.path}: empty file") from None
            if not header or header[0].strip() != "index":
                raise errors.ConnectorInitFailure(
                    f"{self.path}: first header column must be 'index', got {header[:1]!r}")
            names = [h.strip() for h in header[1:]]
            for name in names:
                if not self.schema.has_channel(name):
                    raise errors.ConnectorInitFailure(
                        f"{self.path}: column {name!r} not in series {self.schema.id!r}")
            rows: list[tuple[int, list]] = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(names) + 1:
                    raise errors.ConnectorInitFailure(
                        f"{self.path}:{lineno}: expected {len(names) + 1} cells, got {len(row)}")
                try:
                    index = parse_timestamp_ns(row[0].strip())
                except ValueError as exc:
                    raise errors.ConnectorInitFailure(f"{self.path}:{lineno}: {exc}") from None
                values = []
                for name, cell in zip(names, row[1:]):
                    cell = cell.strip()
                    if cell == "":
                        values.append(None)
                        continue
                    vt = self.schema.channel(name).value_type
                    try:
                        values.append(_parse_cell(vt, cell))
                    except ValueError:
                        raise errors.ConnectorInitFailure(
                            f"{self.path}:{lineno}: {cell!r} is not a valid "
                            f"{vt.value} for channel {name!r}") from None
                rows.append((index, values))
        rows.sort(key=lambda r: r[0])
        for (a, _), (b, _) in zip(rows, rows[1:]):
            if a == b:
                raise errors.ConnectorInitFailure(f"{self.path}: duplicate index {a}")
        index = np.array([r[0] for r in rows], dtype=np.int64)
        columns = {}
        for k, name in enumerate(names):
            vt = self.schema.channel(name).value_type
            cells = [r[1][k] for r in rows]
            mask = np.array([c is not None for c in cells], dtype=np.bool_)
            filled = [c if c is not None else _FILL[vt] for c in cells]
            columns[name] = Column(np.array(filled, dtype=_DTYPE[vt]), mask)
        # channels absent from the file are all-null
        for ch in self.schema.channels:
            if ch.name not in columns:
                columns[ch.name] = Column(
                    np.full(index.shape[0], _FILL[ch.value_type], dtype=_DTYPE[ch.value_type]),
                    np.zeros(index.shape[0], dtype=np.bool_))
        return index, columns

    def fetch(self, index_range: IndexRange, channels: Optional[list[str]]) -> DataBlock:
        lo, hi = _range_slice(self._index, index_range)
        names = channels if channels is not None else self.schema.channel_names()
        for name in names:
            if not self.schema.has_channel(name):
                raise errors.UnknownAttribute(f"series {self.schema.id!r} has no channel {name!r}")
        return DataBlock(self._index[lo:hi],
                         {n: Column(self._columns[n].values[lo:hi], self._columns[n].mask[lo:hi])
                          for n in names})


def _parse_cell(vt: ValueType, cell: str):
    if vt == ValueType.FLOAT64:
        return float(cell)
    if vt == ValueType.INT64:
        return int(cell)
    if vt == ValueType.BOOL:
        lowered = cell.lower()
        if lowered in ("true", "1"):
            return True
        if lowered in ("false", "0"):
            return False
        raise ValueError(f"{cell!r} is not a bool")
    return cell


ConnectorFactory = Callable[[dict, SeriesSchema], Connector]


@dataclass
class BoundSegment:
    range: IndexRange
    kind: str
    config: dict

    def as_dict(self) -> dict:
        return {"range": self.range.as_dict(), "kind": self.kind, "config": dict(self.config)}

    @staticmethod
    def from_dict(d: dict) -> "BoundSegment":
        return BoundSegment(IndexRange.from_dict(d["range"]), d["kind"], dict(d.get("config", {})))


@dataclass
class SegmentBinding:
    series_id: str
    segments: list[BoundSegment]

    def as_dict(self) -> dict:
        return {"series_id": self.series_id, "segments": [s.as_dict() for s in self.segments]}

    @staticmethod
    def from_dict(d: dict) -> "SegmentBinding":
        return SegmentBinding(d["series_id"], [BoundSegment.from_dict(s) for s in d["segments"]])


class Federation:
    """Routes queries of bound series across per-range connectors."""

    def __init__(self, registry: Registry, store: Store,
                 on_change: Optional[Callable[[], None]] = None):
        self.registry = registry
        self.store = store
        self._kinds: dict[str, ConnectorFactory] = {}
        self._bindings: dict[str, tuple[SegmentBinding, list[Connector]]] = {}
        self._lock = threading.RLock()
        self._on_change = on_change
        self.register_connector_kind("native", lambda cfg, schema: NativeConnector(store, schema.id))
        self.register_connector_kind("csv-file", lambda cfg, schema: CsvConnector(
            cfg.get("path", ""), schema))

    # -- plugin interface -----------------------------------------------------

    def register_connector_kind(self, name: str, factory: ConnectorFactory) -> None:
        with self._lock:
            if name in self._kinds:
                raise errors.DuplicateKind(f"connector kind {name!r} already registered")
            self._kinds[name] = factory

    def kinds(self) -> list[str]:
        return sorted(self._kinds)

    # -- bindings ----------------------------------------------------------------

    def bind_segments(self, binding: SegmentBinding) -> None:
        schema = self.registry.get_schema(binding.series_id)
        segments = binding.segments
        if not segments:
            raise errors.InvalidRange("binding needs at least one segment")
        for a, b in zip(segments, segments[1:]):
            if a.range.end is None:
                raise errors.OverlappingSegments(
                    "only the last segment may have an unbounded end")
            if b.range.start is None or b.range.start < a.range.end:
                raise errors.OverlappingSegments(
                    f"segments {a.range.as_dict()} and {b.range.as_dict()} overlap or are unordered")
        connectors = []
        for seg in segments:
            factory = self._kinds.get(seg.kind)
            if factory is None:
                raise errors.UnknownKind(f"unknown connector kind {seg.kind!r}")
            connectors.append(factory(seg.config, schema))
        with self._lock:
            self._bindings[binding.series_id] = (binding, connectors)
            if self._on_change:
                self._on_change()

    def unbind(self, series_id: str) -> None:
        with self._lock:
            self._bindings.pop(series_id, None)
            if self._on_change:
                self._on_change()

    def clear_bindings(self) -> None:
        with self._lock:
            self._bindings.clear()
            if self._on_change:
                self._on_change()

    def is_bound(self, series_id: str) -> bool:
        return series_id in self._bindings

    def bindings(self) -> list[SegmentBinding]:
        with self._lock:
            return [b for b, _ in self._bindings.values()]

    def validate_write(self, series_id: str, first_index: int, last_index: int) -> None:
        """Native writes may only target ranges bound to the native connector."""
        bound = self._bindings.get(series_id)
        if bound is None:
            return
        binding, _ = bound
        for seg in binding.segments:
            if seg.kind == "native" and seg.range.contains(first_index) and seg.range.contains(last_index):
                return
        raise errors.InvalidRange(
            f"series {series_id!r} is federated; writes must fall inside a native segment")

    # -- federated reads -----------------------------------------------------------

    def _bound(self, series_id: str) -> tuple[SegmentBinding, list[Connector]]:
        bound = self._bindings.get(series_id)
        if bound is None:
            raise errors.UnknownSeries(f"series {series_id!r} has no federation binding")
        return bound

    def query(self, series_id: str, spec: QuerySpec) -> QueryResult:
        if spec.aggregation is not None:
            rows = self.aggregate(series_id, spec.range, spec.aggregation.resolution_ns,
                                  spec.aggregation.function, spec.channels)
            return _page_federated(rows, spec, kind="buckets")
        binding, connectors = self._bound(series_id)
        blocks = []
        for seg, conn in zip(binding.segments, connectors):
            sub = seg.range.intersect(spec.range)
            if sub is None:
                continue
            try:
                blocks.append(conn.fetch(sub, spec.channels))
            except errors.CastlineError:
                raise
            except Exception as exc:
                raise errors.SegmentUnavailable(
                    f"segment {seg.kind}:{seg.range.as_dict()} failed: {exc}",
                    segment=seg.kind) from exc
        block = _concat_blocks(blocks, self.registry.get_schema(series_id), spec.channels)
        return _page_federated(block, spec, kind="points", binding=binding)

    def aggregate(self, series_id: str, index_range: IndexRange, resolution_ns: int,
                  function: AggregateFunction | str,
                  channels: Optional[list[str]] = None) -> DataBlock:
        """Per-segment decomposition when buckets align with boundaries,
        otherwise raw merge plus local aggregation."""
        function = AggregateFunction(function)
        if resolution_ns <= 0:
            raise errors.InvalidResolution(f"resolution must be > 0, got {resolution_ns}")
        binding, connectors = self._bound(series_id)
        schema = self.registry.get_schema(series_id)
        edges = [seg.range.end for seg in binding.segments[:-1]] + \
                [seg.range.start for seg in binding.segments[1:]]
        aligned = all(e is None or e % resolution_ns == 0 for e in edges)
        if aligned:
            parts = []
            for seg, conn in zip(binding.segments, connectors):
                sub = seg.range.intersect(index_range)
                if sub is None:
                    continue
                if isinstance(conn, NativeConnector):
                    parts.append(conn.aggregate(sub, resolution_ns, function, channels))
                else:
                    raw = conn.fetch(sub, channels)
                    parts.append(_aggregate_block(raw, schema, resolution_ns, function, channels))
            return _concat_blocks(parts, schema, channels, aggregated=function)
        blocks = []
        for seg, conn in zip(binding.segments, connectors):
            sub = seg.range.intersect(index_range)
            if sub is not None:
                blocks.append(conn.fetch(sub, channels))
        merged = _concat_blocks(blocks, schema, channels)
        return _aggregate_block(merged, schema, resolution_ns, function, channels)


def _concat_blocks(blocks: list[DataBlock], schema: SeriesSchema,
                   channels: Optional[list[str]], aggregated=None) -> DataBlock:
    names = channels if channels is not None else schema.channel_names()
    if aggregated is not None:
        names = [n for n in names if n in (blocks[0].columns if blocks else {})] or names
    if not blocks:
        return DataBlock(np.empty(0, dtype=np.int64), {
            n: Column(np.empty(0, dtype=_DTYPE[schema.channel(n).value_type]),
                      np.empty(0, dtype=np.bool_))
            for n in names if schema.has_channel(n)})
    index = np.concatenate([b.index for b in blocks])
    columns = {}
    for name in blocks[0].columns:
        columns[name] = Column(
            np.concatenate([b.columns[name].values for b in blocks]),
            np.concatenate([b.columns[name].mask for b in blocks]))
    return DataBlock(index, columns)


def _aggregate_block(block: DataBlock, schema: SeriesSchema, resolution_ns: int,
                     function: AggregateFunction, channels: Optional[list[str]]) -> DataBlock:
    """Local bucket aggregation over a raw block (same math as the store)."""
    numeric_only = function in (AggregateFunction.MEAN, AggregateFunction.SUM,
                                AggregateFunction.MIN, AggregateFunction.MAX)
    names = []
    for name in (channels if channels is not None else list(block.columns)):
        vt = schema.channel(name).value_type
        if numeric_only and not vt.numeric:
            if channels is not None:
                raise errors.TypeMismatch(
                    f"{function.value} is not applicable to {vt.value} channel {name!r}")
            continue
        names.append(name)
    per_channel = {}
    for name in names:
        vt = schema.channel(name).value_type
        col = block.columns[name]
        if vt.numeric:
            starts, values = _numeric_bucket(block.index, col.values, col.mask,
                                             resolution_ns, function)
        else:
            starts, values = _generic_bucket(block.index, col.values, col.mask,
                                             resolution_ns, function, vt)
        per_channel[name] = (starts, values)
    all_starts = np.unique(np.concatenate([s for s, _ in per_channel.values()])) \
        if per_channel else np.empty(0, dtype=np.int64)
    columns = {}
    for name, (starts, values) in per_channel.items():
        vt = schema.channel(name).value_type
        if function == AggregateFunction.COUNT:
            out = np.zeros(all_starts.shape[0], dtype=np.int64)
        elif vt.numeric:
            out = np.full(all_starts.shape[0], np.nan, dtype=np.float64)
        else:
            out = np.full(all_starts.shape[0], _FILL[vt], dtype=_DTYPE[vt])
        mask = np.zeros(all_starts.shape[0], dtype=np.bool_)
        pos = np.searchsorted(all_starts, starts)
        out[pos] = values
        mask[pos] = True
        columns[name] = Column(out, mask)
    return DataBlock(all_starts, columns)


def _page_federated(block: DataBlock, spec: QuerySpec, kind: str,
                    binding: Optional[SegmentBinding] = None) -> QueryResult:
    offset = 0
    if spec.cursor is not None:
        payload = decode_cursor(spec.cursor)
        if "a" not in payload:
            raise errors.InvalidCursor(f"cursor {spec.cursor!r} lacks a resume position")
        offset = int(np.searchsorted(block.index, int(payload["a"]), side="right"))
    if spec.limit is None:
        return QueryResult(block.slice(offset, len(block)), None, kind)
    end = min(offset + spec.limit, len(block))
    sliced = block.slice(offset, end)
    next_cursor = None
    if end < len(block):
        last = int(block.index[end - 1])
        seg = 0
        if binding is not None:
            for i, s in enumerate(binding.segments):
                if s.range.contains(last):
                    seg = i
                    break
        next_cursor = encode_cursor({"a": last, "s": seg})
    return QueryResult(sliced, next_cursor, kind)
