"""Append-optimized columnar storage for multivariate series.

One int64 index column per series plus one (values, mask) column pair per
channel, regardless of channel count. Writers build new arrays and swap
them in atomically (copy-on-write), so readers always see a consistent
snapshot without locking. Durability comes from a per-series append log
that is compacted into sealed columnar segment files; the directory layout
is

    <data_dir>/<quoted series id>/manifest.json
                                  segment-g<gen>-<k>.npz
                                  wal-g<gen>.jsonl

Points whose index already exists are upserted per channel: values present
in the new point replace stored ones, channels the new point omits keep
their stored values (attribute updates with a shared timestamp merge into
one multivariate row).
"""

from __future__ import annotations

import base64
import json
import logging
import os
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Optional
from urllib.parse import quote, unquote

import numpy as np

from castline import errors, kernels
from castline.model import (
    AggregateFunction,
    IndexRange,
    PolicyKind,
    Registry,
    Scalar,
    SeriesSchema,
    UNBOUNDED,
    ValueType,
    value_matches,
)

log = logging.getLogger(__name__)

MAX_QUERY_LIMIT = 100_000

_FILL = {
    ValueType.FLOAT64: np.nan,
    ValueType.INT64: 0,
    ValueType.BOOL: False,
    ValueType.TEXT: "",
}

_DTYPE = {
    ValueType.FLOAT64: np.float64,
    ValueType.INT64: np.int64,
    ValueType.BOOL: np.bool_,
    ValueType.TEXT: object,
}


def encode_cursor(payload: dict) -> str:
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return base64.urlsafe_b64encode(raw).decode().rstrip("=")


def decode_cursor(token: str) -> dict:
    try:
        raw = base64.urlsafe_b64decode(token + "=" * (-len(token) % 4))
        payload = json.loads(raw)
        if not isinstance(payload, dict):
            raise ValueError("cursor payload is not an object")
        return payload
    except Exception as exc:
        raise errors.InvalidCursor(f"malformed cursor {token!r}: {exc}") from None


class Column(NamedTuple):
    values: np.ndarray
    mask: np.ndarray


@dataclass
class DataPoint:
    index: int
    values: dict[str, Scalar]


@dataclass
class DataBatch:
    series_id: str
    points: list[DataPoint]


@dataclass(frozen=True)
class Aggregation:
    function: AggregateFunction
    resolution_ns: int


@dataclass
class QuerySpec:
    range: IndexRange = UNBOUNDED
    channels: Optional[list[str]] = None
    limit: Optional[int] = None
    cursor: Optional[str] = None
    aggregation: Optional[Aggregation] = None

    def __post_init__(self):
        if self.limit is not None:
            if self.limit <= 0:
                raise errors.InvalidRange(f"limit must be > 0, got {self.limit}")
            if self.limit > MAX_QUERY_LIMIT:
                raise errors.InvalidRange(f"limit must be <= {MAX_QUERY_LIMIT}, got {self.limit}")


class DataBlock:
    """Columnar query result: one index array plus per-channel columns."""

    def __init__(self, index: np.ndarray, columns: dict[str, Column]):
        self.index = index
        self.columns = columns

    def __len__(self) -> int:
        return int(self.index.shape[0])

    def channel_names(self) -> list[str]:
        return list(self.columns.keys())

    def slice(self, lo: int, hi: int) -> "DataBlock":
        return DataBlock(self.index[lo:hi],
                         {n: Column(c.values[lo:hi], c.mask[lo:hi]) for n, c in self.columns.items()})

    def project(self, channels: Iterable[str]) -> "DataBlock":
        return DataBlock(self.index, {n: self.columns[n] for n in channels})

    def to_points(self) -> list[DataPoint]:
        out = []
        for i in range(len(self)):
            values = {name: col.values[i].item() if hasattr(col.values[i], "item") else col.values[i]
                      for name, col in self.columns.items() if col.mask[i]}
            out.append(DataPoint(int(self.index[i]), values))
        return out

    def same_as(self, other: "DataBlock") -> bool:
        if len(self) != len(other) or set(self.columns) != set(other.columns):
            return False
        if not np.array_equal(self.index, other.index):
            return False
        for name, col in self.columns.items():
            oc = other.columns[name]
            if not np.array_equal(col.mask, oc.mask):
                return False
            if not np.array_equal(col.values[col.mask], oc.values[oc.mask]):
                return False
        return True

    @staticmethod
    def empty(schema_channels: dict[str, ValueType] | None = None) -> "DataBlock":
        cols = {}
        for name, vt in (schema_channels or {}).items():
            cols[name] = Column(np.empty(0, dtype=_DTYPE[vt]), np.empty(0, dtype=np.bool_))
        return DataBlock(np.empty(0, dtype=np.int64), cols)


@dataclass
class QueryResult:
    block: DataBlock
    next_cursor: Optional[str] = None
    kind: str = "points"  # "points" | "buckets"


@dataclass(frozen=True)
class _Mod:
    version: int
    lo: int
    hi: int


class _Snapshot:
    __slots__ = ("index", "columns", "version", "watermark", "mods", "mods_floor")

    def __init__(self, index, columns, version=0, watermark=None, mods=(), mods_floor=0):
        self.index = index
        self.columns = columns
        self.version = version
        self.watermark = watermark
        self.mods = mods
        self.mods_floor = mods_floor  # versions <= floor have been trimmed from mods


_MODS_KEEP = 4096


class _SeriesDisk:
    """Append log + sealed segments for one series directory."""

    def __init__(self, directory: Path, fsync: bool, segment_points: int):
        self.dir = directory
        self.fsync = fsync
        self.segment_points = segment_points
        self.wal_ops = 0
        self._wal_file = None
        self.generation = 0

    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def _write_manifest(self, manifest: dict) -> None:
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, sort_keys=True))
        os.replace(tmp, self.manifest_path())

    def create(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.generation = 0
        self._write_manifest({"generation": 0, "segments": [], "wal": "wal-g0.jsonl",
                              "watermark": None, "version": 0})
        self._open_wal("wal-g0.jsonl")

    def _open_wal(self, name: str) -> None:
        if self._wal_file is not None:
            self._wal_file.close()
        self._wal_file = open(self.dir / name, "a", encoding="utf-8")

    def log(self, op: dict) -> None:
        self._wal_file.write(json.dumps(op, sort_keys=True) + "\n")
        self._wal_file.flush()
        if self.fsync:
            os.fsync(self._wal_file.fileno())
        self.wal_ops += 1

    def compact(self, snap: _Snapshot, schema: SeriesSchema) -> None:
        """Seal the current state into segment files and start a fresh log."""
        gen = self.generation + 1
        names = []
        n = snap.index.shape[0]
        k = 0
        for lo in range(0, max(n, 1), self.segment_points):
            hi = min(lo + self.segment_points, n)
            name = f"segment-g{gen}-{k:05d}.npz"
            arrays: dict[str, np.ndarray] = {"index": snap.index[lo:hi]}
            for ch, col in snap.columns.items():
                arrays[f"v__{ch}"] = col.values[lo:hi]
                arrays[f"m__{ch}"] = col.mask[lo:hi]
            np.savez(self.dir / name, **arrays)
            names.append(name)
            k += 1
        wal_name = f"wal-g{gen}.jsonl"
        (self.dir / wal_name).touch()
        self._write_manifest({"generation": gen, "segments": names, "wal": wal_name,
                              "watermark": snap.watermark, "version": snap.version})
        old_gen = self.generation
        self.generation = gen
        self._open_wal(wal_name)
        self.wal_ops = 0
        for path in self.dir.glob(f"*-g{old_gen}*"):
            path.unlink(missing_ok=True)

    def load(self, schema: SeriesSchema) -> tuple[_Snapshot, list[dict]]:
        manifest = json.loads(self.manifest_path().read_text())
        self.generation = int(manifest["generation"])
        parts_index = []
        parts_cols: dict[str, list] = {ch.name: [] for ch in schema.channels}
        parts_masks: dict[str, list] = {ch.name: [] for ch in schema.channels}
        for name in manifest["segments"]:
            with np.load(self.dir / name, allow_pickle=True) as data:
                parts_index.append(data["index"])
                for ch in schema.channels:
                    parts_cols[ch.name].append(data[f"v__{ch.name}"])
                    parts_masks[ch.name].append(data[f"m__{ch.name}"])
        if parts_index:
            index = np.concatenate(parts_index)
            columns = {name: Column(np.concatenate(parts_cols[name]),
                                    np.concatenate(parts_masks[name]).astype(np.bool_))
                       for name in parts_cols}
        else:
            index = np.empty(0, dtype=np.int64)
            columns = {ch.name: Column(np.empty(0, dtype=_DTYPE[ch.value_type]),
                                       np.empty(0, dtype=np.bool_))
                       for ch in schema.channels}
        version = int(manifest.get("version", 0))
        # change history does not survive restarts; mods_floor marks it unknown
        snap = _Snapshot(index, columns, version=version, watermark=manifest.get("watermark"),
                         mods_floor=version)
        wal_path = self.dir / manifest["wal"]
        ops = []
        if wal_path.exists():
            with open(wal_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        ops.append(json.loads(line))
        self.wal_ops = len(ops)
        self._open_wal(manifest["wal"])
        return snap, ops


class _SeriesState:
    def __init__(self, schema: SeriesSchema, disk: Optional[_SeriesDisk]):
        self.schema = schema
        self.lock = threading.Lock()
        self.disk = disk
        self.snapshot = _Snapshot(
            np.empty(0, dtype=np.int64),
            {ch.name: Column(np.empty(0, dtype=_DTYPE[ch.value_type]), np.empty(0, dtype=np.bool_))
             for ch in schema.channels},
        )


class Store:
    """Columnar store; all mutations per series go through one writer lock."""

    def __init__(self, registry: Registry, data_dir: str | Path | None = None,
                 fsync: bool = True, wal_compact_ops: int = 256, segment_points: int = 65536):
        self.registry = registry
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.fsync = fsync
        self.wal_compact_ops = wal_compact_ops
        self.segment_points = segment_points
        self._states: dict[str, _SeriesState] = {}
        self._states_lock = threading.Lock()
        self._latest: dict[tuple[str, str], tuple[Scalar, int]] = {}
        if self.data_dir is not None:
            self._recover()

    # -- state management -------------------------------------------------

    def _series_dir(self, series_id: str) -> Path:
        return self.data_dir / quote(series_id, safe="")

    def _recover(self) -> None:
        if not self.data_dir.exists():
            self.data_dir.mkdir(parents=True, exist_ok=True)
            return
        for entry in sorted(self.data_dir.iterdir()):
            if not entry.is_dir() or not (entry / "manifest.json").exists():
                continue
            series_id = unquote(entry.name)
            if not self.registry.has_series(series_id):
                log.warning("data directory %s has no registered schema; skipping", entry)
                continue
            schema = self.registry.get_schema(series_id)
            disk = _SeriesDisk(entry, self.fsync, self.segment_points)
            snap, ops = disk.load(schema)
            state = _SeriesState(schema, disk)
            state.snapshot = snap
            for op in ops:
                self._replay(state, op)
            self._states[series_id] = state

    def _replay(self, state: _SeriesState, op: dict) -> None:
        snap = state.snapshot
        if op["op"] == "append":
            index = np.asarray(op["i"], dtype=np.int64)
            cols = {}
            for name, vals in op["c"].items():
                vt = state.schema.channel(name).value_type
                mask = np.array([v is not None for v in vals], dtype=np.bool_)
                filled = [v if v is not None else _FILL[vt] for v in vals]
                cols[name] = Column(np.array(filled, dtype=_DTYPE[vt]), mask)
            state.snapshot = _merge_upsert(snap, state.schema, index, cols)
        elif op["op"] == "delete":
            state.snapshot, _ = _delete_rows(snap, IndexRange(op.get("s"), op.get("e")))
        elif op["op"] == "clearch":
            state.snapshot, _, _ = _clear_channel_rows(snap, op["ch"], IndexRange(op.get("s"), op.get("e")))
        elif op["op"] == "wm":
            state.snapshot = _with_watermark(snap, op["w"])

    def _state(self, series_id: str, create: bool = False) -> Optional[_SeriesState]:
        schema = self.registry.get_schema(series_id)  # raises UnknownSeries
        with self._states_lock:
            state = self._states.get(series_id)
            if state is None and create:
                disk = None
                if self.data_dir is not None:
                    disk = _SeriesDisk(self._series_dir(series_id), self.fsync, self.segment_points)
                    disk.create()
                state = _SeriesState(schema, disk)
                self._states[series_id] = state
            return state

    def _maybe_compact(self, state: _SeriesState) -> None:
        if state.disk is not None and state.disk.wal_ops >= self.wal_compact_ops:
            state.disk.compact(state.snapshot, state.schema)

    # -- writes ------------------------------------------------------------

    def append(self, batch: DataBatch) -> int:
        """Validate, persist to the log, then swap in the merged snapshot."""
        state = self._state(batch.series_id, create=True)
        schema = state.schema
        if not batch.points:
            return 0
        index = np.empty(len(batch.points), dtype=np.int64)
        provided: dict[str, list] = {}
        prev = None
        for i, point in enumerate(batch.points):
            if prev is not None and point.index <= prev:
                raise errors.UnsortedBatch(
                    f"batch indices must be strictly ascending ({point.index} after {prev})")
            prev = point.index
            index[i] = point.index
            present = 0
            for name, value in point.values.items():
                if value is None:
                    continue
                if not schema.has_channel(name):
                    raise errors.TypeMismatch(f"series {schema.id!r} has no channel {name!r}")
                vt = schema.channel(name).value_type
                if not value_matches(vt, value):
                    raise errors.TypeMismatch(
                        f"channel {name!r} expects {vt.value}, got {value!r}")
                provided.setdefault(name, [None] * len(batch.points))[i] = value
                present += 1
            if present == 0:
                raise errors.TypeMismatch(f"point at index {point.index} carries no channel values")
        cols = {}
        for name, vals in provided.items():
            vt = schema.channel(name).value_type
            mask = np.array([v is not None for v in vals], dtype=np.bool_)
            filled = [v if v is not None else _FILL[vt] for v in vals]
            cols[name] = Column(np.array(filled, dtype=_DTYPE[vt]), mask)
        with state.lock:
            if state.disk is not None:
                state.disk.log({"op": "append", "i": [p.index for p in batch.points],
                                "c": {n: list(v) for n, v in provided.items()}})
            state.snapshot = _merge_upsert(state.snapshot, schema, index, cols)
            self._maybe_compact(state)
        return len(batch.points)

    def delete_range(self, series_id: str, index_range: IndexRange) -> int:
        state = self._state(series_id)
        if state is None:
            return 0
        with state.lock:
            new_snap, removed = _delete_rows(state.snapshot, index_range)
            if removed and state.disk is not None:
                state.disk.log({"op": "delete", "s": index_range.start, "e": index_range.end})
            state.snapshot = new_snap
            self._maybe_compact(state)
        return removed

    def clear_channel_range(self, series_id: str, channel: str, index_range: IndexRange) -> tuple[int, int]:
        """Null out one channel in a range; drop rows left with no values.

        Returns (cells cleared, rows removed). Used by per-attribute retention.
        """
        state = self._state(series_id)
        if state is None:
            return 0, 0
        state.schema.channel(channel)
        with state.lock:
            new_snap, cleared, removed = _clear_channel_rows(state.snapshot, channel, index_range)
            if cleared and state.disk is not None:
                state.disk.log({"op": "clearch", "ch": channel,
                                "s": index_range.start, "e": index_range.end})
            state.snapshot = new_snap
            self._maybe_compact(state)
        return cleared, removed

    def drop_series(self, series_id: str) -> None:
        """Forget a series' data entirely (rebuilds of derived series)."""
        with self._states_lock:
            state = self._states.pop(series_id, None)
        if state is not None and state.disk is not None:
            if state.disk._wal_file is not None:
                state.disk._wal_file.close()
            shutil.rmtree(state.disk.dir, ignore_errors=True)

    def raise_watermark(self, series_id: str, boundary: int) -> None:
        """Record that retention purged everything below ``boundary``."""
        state = self._state(series_id, create=True)
        with state.lock:
            snap = state.snapshot
            if snap.watermark is not None and boundary <= snap.watermark:
                return
            if state.disk is not None:
                state.disk.log({"op": "wm", "w": boundary})
            state.snapshot = _with_watermark(snap, boundary)

    # -- reads ---------------------------------------------------------------

    def snapshot_block(self, series_id: str, index_range: IndexRange = UNBOUNDED,
                       channels: Optional[list[str]] = None) -> DataBlock:
        """Raw columnar slice of the series (no paging, no aggregation)."""
        schema = self.registry.get_schema(series_id)
        names = self._check_channels(schema, channels)
        state = self._state(series_id)
        if state is None:
            return DataBlock.empty({n: schema.channel(n).value_type for n in names})
        snap = state.snapshot
        lo, hi = _range_slice(snap.index, index_range)
        block = DataBlock(snap.index, {n: snap.columns[n] for n in names})
        return block.slice(lo, hi)

    def query(self, series_id: str, spec: QuerySpec) -> QueryResult:
        if spec.aggregation is not None:
            rows = self.aggregate_query(series_id, spec.range, spec.aggregation.resolution_ns,
                                        spec.aggregation.function, spec.channels)
            return page_block(rows, spec, kind="buckets")
        block = self.snapshot_block(series_id, spec.range, spec.channels)
        return page_block(block, spec, kind="points")

    def aggregate_query(self, series_id: str, index_range: IndexRange, resolution_ns: int,
                        function: AggregateFunction | str,
                        channels: Optional[list[str]] = None) -> DataBlock:
        """Bucket rows aligned to index 0, half-open, empty buckets omitted."""
        schema = self.registry.get_schema(series_id)
        function = AggregateFunction(function)
        if resolution_ns <= 0:
            raise errors.InvalidResolution(f"resolution must be > 0, got {resolution_ns}")
        names = self._aggregate_channels(schema, channels, function)
        state = self._state(series_id)
        if state is None:
            return DataBlock.empty({n: _agg_value_type(schema, n, function) for n in names})
        snap = state.snapshot
        lo, hi = _range_slice(snap.index, index_range)
        idx = snap.index[lo:hi]
        per_channel: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name in names:
            col = snap.columns[name]
            vt = schema.channel(name).value_type
            if vt.numeric:
                starts, values = _numeric_bucket(idx, col.values[lo:hi], col.mask[lo:hi],
                                                 resolution_ns, function)
            else:
                starts, values = _generic_bucket(idx, col.values[lo:hi], col.mask[lo:hi],
                                                 resolution_ns, function, vt)
            per_channel[name] = (starts, values)
        all_starts = np.unique(np.concatenate([s for s, _ in per_channel.values()])) \
            if per_channel else np.empty(0, dtype=np.int64)
        columns = {}
        for name, (starts, values) in per_channel.items():
            vt = _agg_value_type(schema, name, function)
            out = np.full(all_starts.shape[0], _FILL[vt], dtype=_DTYPE[vt])
            mask = np.zeros(all_starts.shape[0], dtype=np.bool_)
            pos = np.searchsorted(all_starts, starts)
            out[pos] = values
            mask[pos] = True
            columns[name] = Column(out, mask)
        return DataBlock(all_starts, columns)

    # -- auto-historization ingest -------------------------------------------

    def ingest_update(self, asset_id: str, attribute: str, value: Scalar, timestamp: int) -> bool:
        """Historize an attribute update if the effective policy says so.

        The latest-value cache is refreshed either way.
        """
        asset = self.registry.get_asset(asset_id)
        series_id = None
        for ref in self.registry.references_of_asset(asset_id):
            if self.registry.get_schema(ref.series_id).has_channel(attribute):
                series_id = ref.series_id
                break
        if series_id is None:
            raise errors.UnknownAttribute(
                f"asset {asset_id!r} has no referenced series with channel {attribute!r}")
        key = (asset_id, attribute)
        cached = self._latest.get(key)
        if cached is None or timestamp >= cached[1]:
            self._latest[key] = (value, timestamp)
        on = self.registry.effective_policy(series_id, attribute, PolicyKind.HISTORIZATION,
                                            asset_type=asset.asset_type)
        if not on:
            return False
        self.append(DataBatch(series_id, [DataPoint(timestamp, {attribute: value})]))
        return True

    def latest_values(self, asset_id: str) -> dict[str, dict]:
        self.registry.get_asset(asset_id)
        return {attr: {"value": v, "timestamp": ts}
                for (aid, attr), (v, ts) in sorted(self._latest.items()) if aid == asset_id}

    # -- introspection ---------------------------------------------------------

    def version(self, series_id: str) -> int:
        state = self._state(series_id)
        return state.snapshot.version if state else 0

    def watermark(self, series_id: str) -> Optional[int]:
        state = self._state(series_id)
        return state.snapshot.watermark if state else None

    def changes_since(self, series_id: str, version: int) -> Optional[list[tuple[int, int]]]:
        """Modified index ranges after ``version``; None if history was trimmed."""
        state = self._state(series_id)
        if state is None:
            return []
        snap = state.snapshot
        if version < snap.mods_floor:
            return None
        return [(m.lo, m.hi) for m in snap.mods if m.version > version]

    def first_index(self, series_id: str) -> Optional[int]:
        state = self._state(series_id)
        if state is None or len(state.snapshot.index) == 0:
            return None
        return int(state.snapshot.index[0])

    def last_index(self, series_id: str) -> Optional[int]:
        state = self._state(series_id)
        if state is None or len(state.snapshot.index) == 0:
            return None
        return int(state.snapshot.index[-1])

    def last_value_index(self, series_id: str, channel: str) -> Optional[int]:
        """Index of the newest non-null value of one channel."""
        state = self._state(series_id)
        if state is None:
            return None
        snap = state.snapshot
        col = snap.columns.get(channel)
        if col is None or not col.mask.any():
            return None
        return int(snap.index[np.flatnonzero(col.mask)[-1]])

    def series_stats(self, series_id: str) -> dict:
        schema = self.registry.get_schema(series_id)
        state = self._state(series_id)
        snap = state.snapshot if state else None
        stats = {
            "series": series_id,
            "points": len(snap.index) if snap else 0,
            "index_columns": 1,
            "channels": len(schema.channels),
            "version": snap.version if snap else 0,
            "watermark": snap.watermark if snap else None,
            "metadata_bytes": self.registry.metadata_size_bytes(series_id),
        }
        if state and state.disk:
            stats["disk"] = {"generation": state.disk.generation, "wal_ops": state.disk.wal_ops}
        return stats

    def store_stats(self) -> dict:
        with self._states_lock:
            states = dict(self._states)
        return {
            "series_count": len(states),
            "total_points": sum(len(s.snapshot.index) for s in states.values()),
        }

    # -- helpers -----------------------------------------------------------------

    def _check_channels(self, schema: SeriesSchema, channels: Optional[list[str]]) -> list[str]:
        if channels is None:
            return schema.channel_names()
        for name in channels:
            if not schema.has_channel(name):
                raise errors.UnknownAttribute(f"series {schema.id!r} has no channel {name!r}")
        return list(channels)

    def _aggregate_channels(self, schema: SeriesSchema, channels: Optional[list[str]],
                            function: AggregateFunction) -> list[str]:
        numeric_only = function in (AggregateFunction.MEAN, AggregateFunction.SUM,
                                    AggregateFunction.MIN, AggregateFunction.MAX)
        if channels is None:
            names = [ch.name for ch in schema.channels if ch.value_type.numeric or not numeric_only]
        else:
            names = self._check_channels(schema, channels)
            for name in names:
                if numeric_only and not schema.channel(name).value_type.numeric:
                    raise errors.TypeMismatch(
                        f"{function.value} is not applicable to {schema.channel(name).value_type.value} "
                        f"channel {name!r}")
        return names


# -- pure snapshot transforms ---------------------------------------------------


def _range_slice(index: np.ndarray, index_range: IndexRange | None) -> tuple[int, int]:
    if index_range is None:
        return 0, 0
    lo = 0 if index_range.start is None else int(np.searchsorted(index, index_range.start, side="left"))
    hi = index.shape[0] if index_range.end is None else int(np.searchsorted(index, index_range.end, side="left"))
    return lo, max(lo, hi)


def _push_mod(snap: _Snapshot, version: int, lo: int, hi: int) -> tuple[tuple, int]:
    mods = snap.mods + (_Mod(version, lo, hi),)
    floor = snap.mods_floor
    if len(mods) > _MODS_KEEP:
        dropped = mods[:-_MODS_KEEP]
        floor = dropped[-1].version
        mods = mods[-_MODS_KEEP:]
    return mods, floor


def _with_watermark(snap: _Snapshot, boundary: int) -> _Snapshot:
    wm = boundary if snap.watermark is None else max(snap.watermark, boundary)
    return _Snapshot(snap.index, snap.columns, snap.version, wm, snap.mods, snap.mods_floor)


def _merge_upsert(snap: _Snapshot, schema: SeriesSchema, new_index: np.ndarray,
                  new_cols: dict[str, Column]) -> _Snapshot:
    old_index = snap.index
    n = old_index.shape[0]
    pos = np.searchsorted(old_index, new_index)
    exists = np.zeros(new_index.shape[0], dtype=np.bool_)
    inb = pos < n
    exists[inb] = old_index[pos[inb]] == new_index[inb]
    insert_at = pos[~exists]
    index = np.insert(old_index, insert_at, new_index[~exists])
    rpos = np.searchsorted(index, new_index)
    columns: dict[str, Column] = {}
    for ch in schema.channels:
        old = snap.columns[ch.name]
        values = np.insert(old.values, insert_at,
                           np.full(insert_at.shape[0], _FILL[ch.value_type], dtype=_DTYPE[ch.value_type]))
        mask = np.insert(old.mask, insert_at, False)
        new = new_cols.get(ch.name)
        if new is not None:
            sel = new.mask
            values[rpos[sel]] = new.values[sel]
            mask[rpos[sel]] = True
        columns[ch.name] = Column(values, mask)
    version = snap.version + 1
    mods = _push_mod(snap, version, int(new_index[0]), int(new_index[-1]))
    return _Snapshot(index, columns, version, snap.watermark, *mods)


def _clear_channel_rows(snap: _Snapshot, channel: str,
                        index_range: IndexRange) -> tuple[_Snapshot, int, int]:
    lo, hi = _range_slice(snap.index, index_range)
    if lo == hi:
        return snap, 0, 0
    col = snap.columns[channel]
    cleared = int(col.mask[lo:hi].sum())
    if cleared == 0:
        return snap, 0, 0
    mask = col.mask.copy()
    mask[lo:hi] = False
    columns = dict(snap.columns)
    columns[channel] = Column(col.values, mask)
    any_left = np.zeros(len(snap.index), dtype=np.bool_)
    for c in columns.values():
        any_left |= c.mask
    keep = any_left
    keep[:lo] = True
    keep[hi:] = True
    removed = int((~keep).sum())
    mod_lo, mod_hi = int(snap.index[lo]), int(snap.index[hi - 1])
    index = snap.index[keep]
    columns = {n: Column(c.values[keep], c.mask[keep]) for n, c in columns.items()}
    version = snap.version + 1
    mods = _push_mod(snap, version, mod_lo, mod_hi)
    return _Snapshot(index, columns, version, snap.watermark, *mods), cleared, removed


def _delete_rows(snap: _Snapshot, index_range: IndexRange) -> tuple[_Snapshot, int]:
    lo, hi = _range_slice(snap.index, index_range)
    removed = hi - lo
    if removed == 0:
        return snap, 0
    mod_lo, mod_hi = int(snap.index[lo]), int(snap.index[hi - 1])
    keep = np.ones(snap.index.shape[0], dtype=np.bool_)
    keep[lo:hi] = False
    index = snap.index[keep]
    columns = {n: Column(c.values[keep], c.mask[keep]) for n, c in snap.columns.items()}
    version = snap.version + 1
    mods = _push_mod(snap, version, mod_lo, mod_hi)
    return _Snapshot(index, columns, version, snap.watermark, *mods), removed


def page_block(block: DataBlock, spec: QuerySpec, kind: str) -> QueryResult:
    offset = 0
    if spec.cursor is not None:
        payload = decode_cursor(spec.cursor)
        if "a" not in payload:
            raise errors.InvalidCursor(f"cursor {spec.cursor!r} lacks a resume position")
        offset = int(np.searchsorted(block.index, int(payload["a"]), side="right"))
    if spec.limit is None:
        sliced = block.slice(offset, len(block))
        return QueryResult(sliced, None, kind)
    end = min(offset + spec.limit, len(block))
    sliced = block.slice(offset, end)
    next_cursor = None
    if end < len(block):
        next_cursor = encode_cursor({"a": int(block.index[end - 1])})
    return QueryResult(sliced, next_cursor, kind)


def _numeric_bucket(idx: np.ndarray, values: np.ndarray, mask: np.ndarray,
                    resolution: int, function: AggregateFunction) -> tuple[np.ndarray, np.ndarray]:
    vals = values.astype(np.float64, copy=False)
    starts, sums, counts, mins, maxs, firsts, lasts = kernels.bucket_reduce(
        idx, vals, mask, resolution)
    if function == AggregateFunction.MEAN:
        return starts, sums / counts
    if function == AggregateFunction.SUM:
        return starts, sums
    if function == AggregateFunction.COUNT:
        return starts, counts
    if function == AggregateFunction.MIN:
        return starts, mins
    if function == AggregateFunction.MAX:
        return starts, maxs
    if function == AggregateFunction.FIRST:
        return starts, firsts
    return starts, lasts


def _generic_bucket(idx: np.ndarray, values: np.ndarray, mask: np.ndarray,
                    resolution: int, function: AggregateFunction,
                    vt: ValueType) -> tuple[np.ndarray, np.ndarray]:
    vi = idx[mask]
    vv = values[mask]
    if vi.shape[0] == 0:
        out_dtype = np.int64 if function == AggregateFunction.COUNT else _DTYPE[vt]
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=out_dtype)
    bucket = vi // resolution
    run_start = np.concatenate(([0], np.flatnonzero(np.diff(bucket)) + 1))
    run_end = np.concatenate((run_start[1:], [bucket.shape[0]]))
    starts = bucket[run_start] * resolution
    if function == AggregateFunction.COUNT:
        return starts, (run_end - run_start).astype(np.int64)
    if function == AggregateFunction.FIRST:
        return starts, vv[run_start]
    if function == AggregateFunction.LAST:
        return starts, vv[run_end - 1]
    raise errors.TypeMismatch(f"{function.value} is not applicable to {vt.value} channels")


def _agg_value_type(schema: SeriesSchema, channel: str, function: AggregateFunction) -> ValueType:
    if function == AggregateFunction.COUNT:
        return ValueType.INT64
    vt = schema.channel(channel).value_type
    if vt.numeric:
        return ValueType.FLOAT64
    return vt
