"""Platform metamodel: assets, series schemas, references, metadata, policies.

The registry is the single source of truth for what exists. It stores no
data points; the columnar store does that. Index values are int64 and their
unit is fixed per index kind: nanoseconds since epoch for time-indexed
series, millimetres of cumulative cast length for length-indexed series.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional

from castline import errors

Scalar = Any  # float | int | bool | str


class IndexKind(str, Enum):
    TIME = "time"
    LENGTH = "length"


class SeriesKind(str, Enum):
    HISTORICAL = "historical"
    FORECAST = "forecast"
    SCHEDULE = "schedule"
    DERIVED = "derived"


class ValueType(str, Enum):
    FLOAT64 = "float64"
    INT64 = "int64"
    BOOL = "bool"
    TEXT = "text"

    @property
    def numeric(self) -> bool:
        return self in (ValueType.FLOAT64, ValueType.INT64)


class AggregateFunction(str, Enum):
    MEAN = "mean"
    MIN = "min"
    MAX = "max"
    SUM = "sum"
    COUNT = "count"
    FIRST = "first"
    LAST = "last"


class PolicyKind(str, Enum):
    HISTORIZATION = "historization"
    ROLLUP = "rollup"
    RETENTION = "retention"


#: built-in defaults: nothing is recorded or dropped without configuration
POLICY_DEFAULTS = {
    PolicyKind.HISTORIZATION: False,
    PolicyKind.ROLLUP: (),
    PolicyKind.RETENTION: None,  # None = keep forever
}


def value_matches(value_type: ValueType, value: Scalar) -> bool:
    if value_type == ValueType.FLOAT64:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if value_type == ValueType.INT64:
        return isinstance(value, int) and not isinstance(value, bool)
    if value_type == ValueType.BOOL:
        return isinstance(value, bool)
    return isinstance(value, str)


@dataclass(frozen=True)
class IndexRange:
    """Half-open [start, end) slice of an index axis; None = unbounded."""

    start: Optional[int] = None
    end: Optional[int] = None

    def __post_init__(self):
        if self.start is not None and self.end is not None and self.start >= self.end:
            raise errors.InvalidRange(f"range start {self.start} >= end {self.end}")

    def contains(self, index: int) -> bool:
        if self.start is not None and index < self.start:
            return False
        if self.end is not None and index >= self.end:
            return False
        return True

    def intersect(self, other: "IndexRange | None") -> "IndexRange | None":
        """Intersection with another range; None if it would be empty."""
        if other is None:
            return self
        start = self.start if other.start is None else (
            other.start if self.start is None else max(self.start, other.start))
        end = self.end if other.end is None else (
            other.end if self.end is None else min(self.end, other.end))
        if start is not None and end is not None and start >= end:
            return None
        return IndexRange(start, end)

    def as_dict(self) -> dict:
        return {"start": self.start, "end": self.end}

    @staticmethod
    def from_dict(d: dict) -> "IndexRange":
        return IndexRange(d.get("start"), d.get("end"))


UNBOUNDED = IndexRange(None, None)


@dataclass(frozen=True)
class Channel:
    name: str
    value_type: ValueType = ValueType.FLOAT64
    unit: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.name:
            raise errors.InvalidAsset("channel name must be non-empty")

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "value_type": self.value_type.value,
            "unit": self.unit,
            "description": self.description,
        }

    @staticmethod
    def from_dict(d: dict) -> "Channel":
        return Channel(
            name=d["name"],
            value_type=ValueType(d.get("value_type", "float64")),
            unit=d.get("unit", ""),
            description=d.get("description", ""),
        )


@dataclass
class SeriesSchema:
    """Identity and shape of one multivariate series.

    Immutable after definition except for ``static_metadata``.
    """

    id: str
    channels: tuple[Channel, ...]
    index_kind: IndexKind = IndexKind.TIME
    series_kind: SeriesKind = SeriesKind.HISTORICAL
    static_metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.channels = tuple(self.channels)

    def channel(self, name: str) -> Channel:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise errors.UnknownAttribute(f"series {self.id!r} has no channel {name!r}")

    def channel_names(self) -> list[str]:
        return [ch.name for ch in self.channels]

    def has_channel(self, name: str) -> bool:
        return any(ch.name == name for ch in self.channels)

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "channels": [ch.as_dict() for ch in self.channels],
            "index_kind": self.index_kind.value,
            "series_kind": self.series_kind.value,
            "static_metadata": dict(self.static_metadata),
        }

    @staticmethod
    def from_dict(d: dict) -> "SeriesSchema":
        return SeriesSchema(
            id=d["id"],
            channels=tuple(Channel.from_dict(c) for c in d["channels"]),
            index_kind=IndexKind(d.get("index_kind", "time")),
            series_kind=SeriesKind(d.get("series_kind", "historical")),
            static_metadata=dict(d.get("static_metadata", {})),
        )


@dataclass
class Asset:
    id: str
    asset_type: str
    attributes: dict[str, Scalar] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"id": self.id, "asset_type": self.asset_type, "attributes": dict(self.attributes)}

    @staticmethod
    def from_dict(d: dict) -> "Asset":
        return Asset(id=d["id"], asset_type=d["asset_type"], attributes=dict(d.get("attributes", {})))


@dataclass(frozen=True)
class SeriesReference:
    """Asset-to-series link; the data itself is never copied.

    ``subrange`` restricts the visible slice of the series; queries through
    the reference are clamped to it.
    """

    asset_id: str
    series_id: str
    subrange: Optional[IndexRange] = None
    role: str = ""

    def effective_range(self) -> IndexRange:
        return self.subrange if self.subrange is not None else UNBOUNDED

    def as_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "series_id": self.series_id,
            "subrange": self.subrange.as_dict() if self.subrange else None,
            "role": self.role,
        }

    @staticmethod
    def from_dict(d: dict) -> "SeriesReference":
        sub = d.get("subrange")
        return SeriesReference(
            asset_id=d["asset_id"],
            series_id=d["series_id"],
            subrange=IndexRange.from_dict(sub) if sub else None,
            role=d.get("role", ""),
        )


@dataclass(frozen=True)
class MetadataSegment:
    range: IndexRange
    entries: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.range.start is None or self.range.end is None:
            raise errors.InvalidRange("metadata segments must be bounded")
        for key in self.entries:
            if not key:
                raise errors.InvalidRange("metadata entry keys must be non-empty")

    def as_dict(self) -> dict:
        return {"range": self.range.as_dict(), "entries": dict(self.entries)}

    @staticmethod
    def from_dict(d: dict) -> "MetadataSegment":
        return MetadataSegment(IndexRange.from_dict(d["range"]), dict(d["entries"]))


@dataclass(frozen=True)
class RollupRule:
    """One aggregated level derived from a source series.

    ``functions`` with MEAN are materialized as sum+count columns so coarser
    levels re-aggregate exactly.
    """

    resolution_ns: int
    functions: frozenset[AggregateFunction]
    retention_ns: Optional[int] = None  # None = keep forever

    def __post_init__(self):
        if self.resolution_ns <= 0:
            raise errors.InvalidResolution(f"rollup resolution must be > 0, got {self.resolution_ns}")
        if not self.functions:
            raise errors.InvalidResolution("rollup rule needs at least one aggregate function")
        object.__setattr__(self, "functions", frozenset(AggregateFunction(f) for f in self.functions))

    def as_dict(self) -> dict:
        return {
            "resolution_ns": self.resolution_ns,
            "functions": sorted(f.value for f in self.functions),
            "retention_ns": self.retention_ns,
        }

    @staticmethod
    def from_dict(d: dict) -> "RollupRule":
        return RollupRule(
            resolution_ns=d["resolution_ns"],
            functions=frozenset(AggregateFunction(f) for f in d["functions"]),
            retention_ns=d.get("retention_ns"),
        )


# Policy level keys: ("global",), ("type", asset_type), ("attr", series_id, channel)
PolicyLevelKey = tuple


def global_level() -> PolicyLevelKey:
    return ("global",)


def type_level(asset_type: str) -> PolicyLevelKey:
    return ("type", asset_type)


def attribute_level(series_id: str, channel: str) -> PolicyLevelKey:
    return ("attr", series_id, channel)


class Registry:
    """Registry of assets, series, references, metadata and layered policies.

    Mutations are serialized behind one lock; reads take the same lock only
    long enough to snapshot the relevant structures, so handlers can share a
    single instance freely.
    """

    def __init__(self, on_change: Callable[[], None] | None = None):
        self._lock = threading.RLock()
        self._assets: dict[str, Asset] = {}
        self._schemas: dict[str, SeriesSchema] = {}
        self._references: list[SeriesReference] = []
        self._segments: dict[str, list[MetadataSegment]] = {}
        self._policies: dict[PolicyKind, dict[PolicyLevelKey, Any]] = {k: {} for k in PolicyKind}
        self._on_change = on_change

    def _changed(self):
        if self._on_change is not None:
            self._on_change()

    # -- assets ---------------------------------------------------------

    def register_asset(self, asset: Asset) -> str:
        if not asset.id:
            raise errors.InvalidAsset("asset id must be non-empty")
        if not asset.asset_type:
            raise errors.InvalidAsset(f"asset {asset.id!r} has empty type")
        with self._lock:
            existing = self._assets.get(asset.id)
            if existing is not None:
                if existing.as_dict() == asset.as_dict():
                    return asset.id  # idempotent re-registration
                raise errors.DuplicateId(f"asset id {asset.id!r} already registered with different payload")
            self._assets[asset.id] = asset
            self._changed()
        return asset.id

    def get_asset(self, asset_id: str) -> Asset:
        asset = self._assets.get(asset_id)
        if asset is None:
            raise errors.UnknownAsset(f"unknown asset {asset_id!r}")
        return asset

    def list_assets(self) -> list[Asset]:
        with self._lock:
            return sorted(self._assets.values(), key=lambda a: a.id)

    # -- series schemas ---------------------------------------------------

    def define_series(self, schema: SeriesSchema) -> str:
        if not schema.id:
            raise errors.InvalidAsset("series id must be non-empty")
        if len(schema.channels) == 0:
            raise errors.EmptyChannelList(f"series {schema.id!r} has no channels")
        names = [ch.name for ch in schema.channels]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise errors.DuplicateChannelName(f"series {schema.id!r} repeats channel {dup!r}")
        with self._lock:
            existing = self._schemas.get(schema.id)
            if existing is not None:
                if existing.as_dict() == schema.as_dict():
                    return schema.id
                raise errors.DuplicateId(f"series id {schema.id!r} already defined with different schema")
            self._schemas[schema.id] = schema
            self._segments.setdefault(schema.id, [])
            self._changed()
        return schema.id

    def get_schema(self, series_id: str) -> SeriesSchema:
        schema = self._schemas.get(series_id)
        if schema is None:
            raise errors.UnknownSeries(f"unknown series {series_id!r}")
        return schema

    def redefine_series(self, schema: SeriesSchema) -> str:
        """Replace an existing schema; only derived series plumbing uses this."""
        with self._lock:
            self._schemas[schema.id] = schema
            self._segments.setdefault(schema.id, [])
            self._changed()
        return schema.id

    def has_series(self, series_id: str) -> bool:
        return series_id in self._schemas

    def list_series(self) -> list[SeriesSchema]:
        with self._lock:
            return sorted(self._schemas.values(), key=lambda s: s.id)

    # -- references -------------------------------------------------------

    def attach_reference(self, ref: SeriesReference) -> None:
        with self._lock:
            self.get_asset(ref.asset_id)
            self.get_schema(ref.series_id)
            if any(r == ref for r in self._references):
                return  # identical reference already attached
            self._references.append(ref)
            self._changed()

    def references_of_asset(self, asset_id: str) -> list[SeriesReference]:
        self.get_asset(asset_id)
        with self._lock:
            return [r for r in self._references if r.asset_id == asset_id]

    def references_of_series(self, series_id: str) -> list[SeriesReference]:
        self.get_schema(series_id)
        with self._lock:
            return [r for r in self._references if r.series_id == series_id]

    def resolve_series(self, asset_id: str) -> list[tuple[str, IndexRange, str]]:
        """All series referenced by the asset with their effective ranges."""
        return [(r.series_id, r.effective_range(), r.role) for r in self.references_of_asset(asset_id)]

    # -- metadata ----------------------------------------------------------

    def set_static_metadata(self, series_id: str, entries: dict[str, str]) -> None:
        with self._lock:
            schema = self.get_schema(series_id)
            for key in entries:
                if not key:
                    raise errors.InvalidRange("metadata entry keys must be non-empty")
            schema.static_metadata.update(entries)
            self._changed()

    def add_metadata_segment(self, series_id: str, segment: MetadataSegment) -> None:
        with self._lock:
            self.get_schema(series_id)
            existing = self._segments.setdefault(series_id, [])
            if any(seg == segment for seg in existing):
                return  # identical segment already present
            for seg in existing:
                if segment.range.intersect(seg.range) is not None:
                    raise errors.OverlappingSegment(
                        f"segment {segment.range.as_dict()} overlaps {seg.range.as_dict()}")
            existing.append(segment)
            existing.sort(key=lambda s: s.range.start)
            self._changed()

    def metadata_segments(self, series_id: str) -> list[MetadataSegment]:
        self.get_schema(series_id)
        return list(self._segments.get(series_id, []))

    def metadata_at(self, series_id: str, index: int) -> dict[str, str]:
        """Static entries overlaid by the unique segment containing ``index``."""
        with self._lock:
            schema = self.get_schema(series_id)
            merged = dict(schema.static_metadata)
            for seg in self._segments.get(series_id, []):
                if seg.range.contains(index):
                    merged.update(seg.entries)  # segment keys shadow static keys
                    break
            return merged

    def metadata_size_bytes(self, series_id: str) -> int:
        """Stored metadata volume; must not grow with the number of data points."""
        with self._lock:
            schema = self.get_schema(series_id)
            payload = {
                "static": schema.static_metadata,
                "segments": [s.as_dict() for s in self._segments.get(series_id, [])],
            }
            return len(json.dumps(payload, sort_keys=True).encode())

    # -- policies -----------------------------------------------------------

    def set_policy(self, kind: PolicyKind, level: PolicyLevelKey, value: Any) -> None:
        kind = PolicyKind(kind)
        if kind == PolicyKind.ROLLUP:
            value = tuple(value)
        elif kind == PolicyKind.HISTORIZATION:
            value = bool(value)
        elif kind == PolicyKind.RETENTION and value is not None:
            value = int(value)
            if value <= 0:
                raise errors.InvalidResolution("retention must be > 0 or forever")
        with self._lock:
            self._policies[kind][tuple(level)] = value
            self._changed()

    def clear_policies(self) -> None:
        with self._lock:
            self._policies = {k: {} for k in PolicyKind}
            self._changed()

    def policy_at(self, kind: PolicyKind, level: PolicyLevelKey) -> Any:
        """Setting stored at exactly this level, or None."""
        return self._policies[PolicyKind(kind)].get(tuple(level))

    def effective_policy(self, series_id: str, channel: str | None, kind: PolicyKind,
                         asset_type: str | None = None) -> Any:
        """Resolve a policy with precedence PerAttribute > PerType > Global > default.

        The PerType level applies through the assets referencing the series;
        when ``asset_type`` is not supplied, referencing assets are scanned in
        attach order and the first type carrying a setting wins.
        """
        kind = PolicyKind(kind)
        with self._lock:
            schema = self.get_schema(series_id)
            if channel is not None and not schema.has_channel(channel):
                raise errors.UnknownAttribute(f"series {series_id!r} has no channel {channel!r}")
            table = self._policies[kind]
            if channel is not None:
                key = attribute_level(series_id, channel)
                if key in table:
                    return table[key]
            if asset_type is not None:
                key = type_level(asset_type)
                if key in table:
                    return table[key]
            else:
                for ref in self._references:
                    if ref.series_id != series_id:
                        continue
                    asset = self._assets.get(ref.asset_id)
                    if asset is None:
                        continue
                    key = type_level(asset.asset_type)
                    if key in table:
                        return table[key]
            if global_level() in table:
                return table[global_level()]
            return POLICY_DEFAULTS[kind]

    def asset_types_of_series(self, series_id: str) -> list[str]:
        """Asset types referencing the series, in attach order, de-duplicated."""
        seen: list[str] = []
        for ref in self.references_of_series(series_id):
            t = self._assets[ref.asset_id].asset_type
            if t not in seen:
                seen.append(t)
        return seen

    # -- persistence ---------------------------------------------------------

    def as_dict(self) -> dict:
        with self._lock:
            return {
                "assets": [a.as_dict() for a in sorted(self._assets.values(), key=lambda a: a.id)],
                "series": [s.as_dict() for s in sorted(self._schemas.values(), key=lambda s: s.id)],
                "references": [r.as_dict() for r in self._references],
                "segments": {sid: [s.as_dict() for s in segs]
                             for sid, segs in sorted(self._segments.items()) if segs},
                "policies": self._policies_as_dict(),
            }

    def _policies_as_dict(self) -> list[dict]:
        out = []
        for kind, table in self._policies.items():
            for level, value in table.items():
                if kind == PolicyKind.ROLLUP:
                    value = [r.as_dict() for r in value]
                out.append({"kind": kind.value, "level": list(level), "value": value})
        return out

    def restore(self, payload: dict) -> None:
        with self._lock:
            for a in payload.get("assets", []):
                self._assets[a["id"]] = Asset.from_dict(a)
            for s in payload.get("series", []):
                schema = SeriesSchema.from_dict(s)
                self._schemas[schema.id] = schema
                self._segments.setdefault(schema.id, [])
            self._references = [SeriesReference.from_dict(r) for r in payload.get("references", [])]
            for sid, segs in payload.get("segments", {}).items():
                self._segments[sid] = [MetadataSegment.from_dict(s) for s in segs]
            for p in payload.get("policies", []):
                kind = PolicyKind(p["kind"])
                value = p["value"]
                if kind == PolicyKind.ROLLUP:
                    value = tuple(RollupRule.from_dict(r) for r in value)
                self._policies[kind][tuple(p["level"])] = value
