"""Time-to-position transformation engine.

Casting speed integrates to cumulative cast length; cut events assign
length intervals to products; per-sensor offsets map each reading to a
material coordinate; readings are resampled onto an equidistant position
grid per product. Views come in materialized and on-demand flavours that
must return identical tables for identical underlying data.

Material coordinate 0 is anchored at strand start. All positions are whole
millimetres; provenance timestamps are whole nanoseconds.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional

import numpy as np

from castline import errors, kernels
from castline.model import (
    Channel,
    IndexKind,
    IndexRange,
    Registry,
    SeriesKind,
    SeriesSchema,
    UNBOUNDED,
    ValueType,
)
from castline.store import Column, DataBatch, DataBlock, DataPoint, Store


class IndexMode(str, Enum):
    POSITION = "position"
    AUX_TIME = "aux_time"


class Materialization(str, Enum):
    ON_DEMAND = "on_demand"
    MATERIALIZED = "materialized"


@dataclass(frozen=True)
class SensorOffset:
    """Distance of a sensor below the mould along the strand."""

    channel: str
    offset_mm: int

    def __post_init__(self):
        if self.offset_mm < 0:
            raise errors.InvalidDefinition(f"sensor offset must be >= 0, got {self.offset_mm}")


@dataclass(frozen=True)
class CutEvent:
    """Product occupying material coordinates [start_mm, end_mm)."""

    product_id: str
    start_mm: int
    end_mm: int

    def __post_init__(self):
        if self.end_mm <= self.start_mm:
            raise errors.OverlappingCuts(
                f"cut {self.product_id!r} has end {self.end_mm} <= start {self.start_mm}")


@dataclass
class LengthProfile:
    """Cumulative cast length samples: monotone non-decreasing l(t)."""

    t_ns: np.ndarray
    l_mm: np.ndarray

    def __len__(self) -> int:
        return int(self.t_ns.shape[0])


@dataclass(frozen=True)
class ProductSlice:
    product_id: str
    start_mm: int
    end_mm: int
    coverage: str  # "full" | "partial"
    usable: Optional[IndexRange]


@dataclass
class ViewDefinition:
    id: str
    source_series: str
    speed_channel: str
    offsets: tuple[SensorOffset, ...]
    step_mm: int
    cut_series: Optional[str] = None
    cuts: tuple[CutEvent, ...] = ()
    index_mode: IndexMode = IndexMode.POSITION
    materialization: Materialization = Materialization.ON_DEMAND
    length_channel: Optional[str] = None  # precomputed cumulative length, skips integration
    l0_mm: int = 0

    def offset_of(self, channel: str) -> int:
        for o in self.offsets:
            if o.channel == channel:
                return o.offset_mm
        raise errors.MissingOffset(f"view {self.id!r} has no sensor offset for channel {channel!r}")

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "source_series": self.source_series,
            "speed_channel": self.speed_channel,
            "offsets": [{"channel": o.channel, "offset_mm": o.offset_mm} for o in self.offsets],
            "step_mm": self.step_mm,
            "cut_series": self.cut_series,
            "cuts": [{"product_id": c.product_id, "start_mm": c.start_mm, "end_mm": c.end_mm}
                     for c in self.cuts],
            "index_mode": self.index_mode.value,
            "materialization": self.materialization.value,
            "length_channel": self.length_channel,
            "l0_mm": self.l0_mm,
        }

    @staticmethod
    def from_dict(d: dict) -> "ViewDefinition":
        return ViewDefinition(
            id=d["id"],
            source_series=d["source_series"],
            speed_channel=d.get("speed_channel", ""),
            offsets=tuple(SensorOffset(o["channel"], int(o["offset_mm"])) for o in d.get("offsets", [])),
            step_mm=int(d["step_mm"]),
            cut_series=d.get("cut_series"),
            cuts=tuple(CutEvent(c["product_id"], int(c["start_mm"]), int(c["end_mm"]))
                       for c in d.get("cuts", []) or []),
            index_mode=IndexMode(d.get("index_mode", "position")),
            materialization=Materialization(d.get("materialization", "on_demand")),
            length_channel=d.get("length_channel"),
            l0_mm=int(d.get("l0_mm", 0)),
        )


class ProductColumn(NamedTuple):
    values: np.ndarray  # float64
    mask: np.ndarray    # bool; False = null (no extrapolation)
    prov_ns: np.ndarray  # int64 source timestamp each cell was interpolated from


class ProductTable:
    """Equidistant per-product grid with per-cell provenance."""

    def __init__(self, product_id: str, view_id: str, start_mm: int, end_mm: int, step_mm: int,
                 index_mode: IndexMode, positions: np.ndarray, index: np.ndarray,
                 columns: dict[str, ProductColumn]):
        self.product_id = product_id
        self.view_id = view_id
        self.start_mm = start_mm
        self.end_mm = end_mm
        self.step_mm = step_mm
        self.index_mode = index_mode
        self.positions = positions
        self.index = index
        self.columns = columns

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def same_as(self, other: "ProductTable") -> bool:
        if (self.product_id, self.start_mm, self.end_mm, self.step_mm, self.index_mode) != \
                (other.product_id, other.start_mm, other.end_mm, other.step_mm, other.index_mode):
            return False
        if not np.array_equal(self.positions, other.positions):
            return False
        if not np.array_equal(self.index, other.index):
            return False
        if set(self.columns) != set(other.columns):
            return False
        for name, col in self.columns.items():
            oc = other.columns[name]
            if not np.array_equal(col.mask, oc.mask):
                return False
            if not np.array_equal(col.values[col.mask], oc.values[oc.mask]):
                return False
            if not np.array_equal(col.prov_ns[col.mask], oc.prov_ns[oc.mask]):
                return False
        return True

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            values = {}
            prov = {}
            for name, col in self.columns.items():
                if col.mask[i]:
                    values[name] = float(col.values[i])
                    prov[name] = int(col.prov_ns[i])
            out.append({"i": int(self.index[i]), "x": int(self.positions[i]), "v": values, "t": prov})
        return out


# -- core transformations ------------------------------------------------------


def cumulative_length(t_ns: np.ndarray, v_m_min: np.ndarray, l0_mm: int = 0) -> LengthProfile:
    """Integrate casting speed (m/min) over time into cast length (mm).

    Trapezoidal rule, rounded to whole millimetres only after accumulation.
    """
    t_ns = np.asarray(t_ns, dtype=np.int64)
    v = np.asarray(v_m_min, dtype=np.float64)
    if t_ns.shape[0] != v.shape[0]:
        raise errors.UnsortedInput("speed and timestamp arrays differ in length")
    if t_ns.shape[0] == 0:
        return LengthProfile(t_ns, np.empty(0, dtype=np.int64))
    if np.any(np.diff(t_ns) <= 0):
        raise errors.UnsortedInput("speed points must be strictly ascending in time")
    if np.any(v < 0):
        raise errors.NegativeSpeed("casting speed must be >= 0")
    l_float = kernels.cum_trapezoid_mm(t_ns, v, float(l0_mm))
    return LengthProfile(t_ns, np.rint(l_float).astype(np.int64))


def invert_length(profile: LengthProfile, target_mm: int) -> int:
    """Timestamp at which cast length reached ``target_mm``.

    Linear interpolation of t over l; zero-speed plateaus resolve to the
    earliest timestamp.
    """
    if len(profile) == 0:
        raise errors.OutOfCoverage("empty length profile")
    l = profile.l_mm
    t = profile.t_ns
    if target_mm < l[0] or target_mm > l[-1]:
        raise errors.OutOfCoverage(
            f"length {target_mm} outside cast coverage [{l[0]}, {l[-1]}]")
    i = int(np.searchsorted(l, target_mm, side="left"))
    if l[i] == target_mm:
        return int(t[i])
    lo, hi = i - 1, i
    w = (target_mm - l[lo]) / (l[hi] - l[lo])
    return int(np.rint(t[lo] + (t[hi] - t[lo]) * w))


def _invert_clamped(profile: LengthProfile, target_mm: int) -> int:
    clamped = min(max(target_mm, int(profile.l_mm[0])), int(profile.l_mm[-1]))
    return invert_length(profile, clamped)


def check_cuts(cuts: list[CutEvent] | tuple[CutEvent, ...]) -> list[CutEvent]:
    ordered = sorted(cuts, key=lambda c: c.start_mm)
    seen = set()
    for a, b in zip(ordered, ordered[1:]):
        if b.start_mm < a.end_mm:
            raise errors.OverlappingCuts(
                f"cut {b.product_id!r} [{b.start_mm},{b.end_mm}) overlaps "
                f"{a.product_id!r} [{a.start_mm},{a.end_mm})")
    for c in ordered:
        if c.product_id in seen:
            raise errors.OverlappingCuts(f"product {c.product_id!r} appears in two cuts")
        seen.add(c.product_id)
    return ordered


def slice_products(profile: LengthProfile, cuts: list[CutEvent]) -> list[ProductSlice]:
    """Annotate each cut with its coverage by the casting profile."""
    ordered = check_cuts(cuts)
    out = []
    l_first = int(profile.l_mm[0]) if len(profile) else 0
    l_last = int(profile.l_mm[-1]) if len(profile) else 0
    for cut in ordered:
        if len(profile) == 0:
            out.append(ProductSlice(cut.product_id, cut.start_mm, cut.end_mm, "partial", None))
            continue
        full = cut.start_mm >= l_first and cut.end_mm <= l_last
        usable = None
        if l_first < l_last:
            usable = IndexRange(cut.start_mm, cut.end_mm).intersect(IndexRange(l_first, l_last))
        out.append(ProductSlice(cut.product_id, cut.start_mm, cut.end_mm,
                                "full" if full else "partial", usable))
    return out


def map_readings(profile: LengthProfile, t_ns: np.ndarray, offset_mm: int) -> tuple[np.ndarray, np.ndarray]:
    """Map reading timestamps to material coordinates l = L(t) - offset.

    Returns (l_mm int64, keep mask); readings outside the profile's time
    span are dropped.
    """
    l_at = kernels.interp_grid(profile.t_ns, profile.l_mm.astype(np.float64),
                               profile.t_ns, np.asarray(t_ns, dtype=np.int64))
    values, _, inside = l_at
    l_mm = np.rint(values).astype(np.int64) - offset_mm
    return l_mm, inside


BACKING_AUX_CHANNEL = "aux_t"


def _backing_series_id(view_id: str, product_id: str) -> str:
    return f"{view_id}::product::{product_id}"


class ViewEngine:
    """Registry of transformation views plus the materialization machinery.

    Materialized tables live in ordinary length-indexed derived series, so
    the whole store/rollup/API machinery applies to them unchanged.
    """

    def __init__(self, registry: Registry, store: Store,
                 reader: Optional[Callable[[str, IndexRange, Optional[list[str]]], DataBlock]] = None,
                 on_change: Optional[Callable[[], None]] = None):
        self.registry = registry
        self.store = store
        self.reader = reader if reader is not None else (
            lambda series, rng, channels: store.snapshot_block(series, rng, channels))
        self._views: dict[str, ViewDefinition] = {}
        self._lock = threading.RLock()
        self._on_change = on_change

    # -- registration -----------------------------------------------------

    def define_view(self, vd: ViewDefinition) -> str:
        if vd.step_mm <= 0:
            raise errors.InvalidDefinition(f"resample step must be > 0, got {vd.step_mm}")
        if not vd.offsets:
            raise errors.InvalidDefinition("view needs at least one sensor offset")
        schema = self.registry.get_schema(vd.source_series)
        if schema.index_kind != IndexKind.TIME:
            raise errors.InvalidDefinition("view source must be time-indexed")
        if vd.length_channel is not None:
            self._require_numeric(schema, vd.length_channel)
        else:
            self._require_numeric(schema, vd.speed_channel)
        for off in vd.offsets:
            self._require_numeric(schema, off.channel)
        if vd.cut_series is not None:
            cut_schema = self.registry.get_schema(vd.cut_series)
            for required in ("product", "start_mm", "end_mm"):
                if not cut_schema.has_channel(required):
                    raise errors.InvalidDefinition(
                        f"cut series {vd.cut_series!r} lacks channel {required!r}")
        elif not vd.cuts:
            raise errors.InvalidDefinition("view needs a cut series or a static cut list")
        else:
            check_cuts(vd.cuts)
        with self._lock:
            existing = self._views.get(vd.id)
            if existing is not None and existing.as_dict() != vd.as_dict():
                raise errors.DuplicateId(f"view id {vd.id!r} already defined differently")
            self._views[vd.id] = vd
            if self._on_change:
                self._on_change()
        if vd.materialization == Materialization.MATERIALIZED:
            self.refresh_materialized(vd.id)
        return vd.id

    def _require_numeric(self, schema: SeriesSchema, channel: str) -> None:
        if not schema.has_channel(channel):
            raise errors.InvalidDefinition(
                f"source series {schema.id!r} has no channel {channel!r}")
        if not schema.channel(channel).value_type.numeric:
            raise errors.InvalidDefinition(f"channel {channel!r} is not numeric")

    def get_view(self, view_id: str) -> ViewDefinition:
        vd = self._views.get(view_id)
        if vd is None:
            raise errors.UnknownView(f"unknown view {view_id!r}")
        return vd

    def list_views(self) -> list[ViewDefinition]:
        with self._lock:
            return sorted(self._views.values(), key=lambda v: v.id)

    def drop_all_views(self) -> None:
        with self._lock:
            self._views.clear()
            if self._on_change:
                self._on_change()

    # -- inputs ------------------------------------------------------------

    def cut_events(self, vd: ViewDefinition) -> list[CutEvent]:
        if vd.cut_series is None:
            return check_cuts(vd.cuts)
        block = self.reader(vd.cut_series, UNBOUNDED, ["product", "start_mm", "end_mm"])
        cuts = []
        prod, start, end = block.columns["product"], block.columns["start_mm"], block.columns["end_mm"]
        for i in range(len(block)):
            if not (prod.mask[i] and start.mask[i] and end.mask[i]):
                continue
            cuts.append(CutEvent(str(prod.values[i]), int(start.values[i]), int(end.values[i])))
        return check_cuts(cuts)

    def length_profile(self, vd: ViewDefinition) -> LengthProfile:
        if vd.length_channel is not None:
            block = self.reader(vd.source_series, UNBOUNDED, [vd.length_channel])
            col = block.columns[vd.length_channel]
            t = block.index[col.mask]
            l = np.rint(col.values[col.mask].astype(np.float64)).astype(np.int64)
            if np.any(np.diff(l) < 0):
                raise errors.UnsortedInput("precomputed cast length must be non-decreasing")
            return LengthProfile(t, l)
        block = self.reader(vd.source_series, UNBOUNDED, [vd.speed_channel])
        col = block.columns[vd.speed_channel]
        t = block.index[col.mask]
        v = col.values[col.mask].astype(np.float64)
        return cumulative_length(t, v, vd.l0_mm)

    # -- re-indexing ----------------------------------------------------------

    def reindex_to_position(self, view: ViewDefinition | str, product_id: str,
                            channels: Optional[list[str]] = None) -> ProductTable:
        vd = self.get_view(view) if isinstance(view, str) else view
        cuts = {c.product_id: c for c in self.cut_events(vd)}
        cut = cuts.get(product_id)
        if cut is None:
            raise errors.UnknownProduct(f"view {vd.id!r} knows no product {product_id!r}")
        profile = self.length_profile(vd)
        if len(profile) == 0 or cut.end_mm <= profile.l_mm[0] or cut.start_mm >= profile.l_mm[-1]:
            raise errors.OutOfCoverage(
                f"product {product_id!r} [{cut.start_mm},{cut.end_mm}) not covered by cast length")
        names = channels if channels is not None else [o.channel for o in vd.offsets]
        product_len = cut.end_mm - cut.start_mm
        n_rows = (product_len + vd.step_mm - 1) // vd.step_mm
        positions = np.arange(n_rows, dtype=np.int64) * vd.step_mm
        columns: dict[str, ProductColumn] = {}
        for name in names:
            d = vd.offset_of(name)
            block = self.reader(vd.source_series, UNBOUNDED, [name])
            col = block.columns[name]
            t_j = block.index[col.mask]
            y_j = col.values[col.mask].astype(np.float64)
            l_j, inside = map_readings(profile, t_j, d)
            x_j = l_j[inside] - cut.start_mm
            t_j = t_j[inside]
            y_j = y_j[inside]
            keep = (x_j >= 0) & (x_j < product_len)
            x_j, t_j, y_j = x_j[keep], t_j[keep], y_j[keep]
            # zero-speed plateaus map several readings to one x; earliest wins
            x_u, first = np.unique(x_j, return_index=True)
            vals, prov_f, mask = kernels.interp_grid(x_u, y_j[first], t_j[first], positions)
            prov = np.zeros(positions.shape[0], dtype=np.int64)
            prov[mask] = np.rint(prov_f[mask]).astype(np.int64)
            columns[name] = ProductColumn(vals, mask, prov)
        if vd.index_mode == IndexMode.AUX_TIME:
            index = np.array([_invert_clamped(profile, cut.start_mm + int(x)) for x in positions],
                             dtype=np.int64)
        else:
            index = positions
        return ProductTable(product_id, vd.id, cut.start_mm, cut.end_mm, vd.step_mm,
                            vd.index_mode, positions, index, columns)

    # -- materialization --------------------------------------------------------

    def query_view(self, view_id: str, product_id: str) -> ProductTable:
        vd = self.get_view(view_id)
        cuts = {c.product_id: c for c in self.cut_events(vd)}
        cut = cuts.get(product_id)
        if cut is None:
            raise errors.UnknownProduct(f"view {vd.id!r} knows no product {product_id!r}")
        if vd.materialization == Materialization.ON_DEMAND:
            return self.reindex_to_position(vd, product_id)
        if self._is_stale(vd, cut):
            self._materialize(vd, product_id)
        return self._load_table(vd, product_id)

    def refresh_materialized(self, view_id: str) -> int:
        vd = self.get_view(view_id)
        if vd.materialization != Materialization.MATERIALIZED:
            raise errors.InvalidDefinition(f"view {view_id!r} is not materialized")
        refreshed = 0
        for cut in self.cut_events(vd):
            try:
                if self._is_stale(vd, cut):
                    self._materialize(vd, cut.product_id)
                    refreshed += 1
            except errors.OutOfCoverage:
                continue  # product not cast yet; picked up by a later refresh
        return refreshed

    def _is_stale(self, vd: ViewDefinition, cut: CutEvent) -> bool:
        backing = _backing_series_id(vd.id, cut.product_id)
        if not self.registry.has_series(backing):
            return True
        meta = self.registry.get_schema(backing).static_metadata
        try:
            v0 = int(meta["view.source_version"])
            dep_end = int(meta["view.dep_end"])
            start_mm = int(meta["view.start_mm"])
            end_mm = int(meta["view.end_mm"])
        except (KeyError, ValueError):
            return True
        if (start_mm, end_mm) != (cut.start_mm, cut.end_mm):
            return True
        if vd.cut_series is not None:
            cut_v = meta.get("view.cut_version")
            if cut_v is None or int(cut_v) != self.store.version(vd.cut_series):
                return True
        mods = self.store.changes_since(vd.source_series, v0)
        if mods is None:
            return True
        return any(lo <= dep_end for lo, _hi in mods)

    def _materialize(self, vd: ViewDefinition, product_id: str) -> None:
        source_version = self.store.version(vd.source_series)
        cut_version = self.store.version(vd.cut_series) if vd.cut_series is not None else 0
        table = self.reindex_to_position(vd, product_id)
        profile = self.length_profile(vd)
        dmax = max(o.offset_mm for o in vd.offsets)
        dep_end = _invert_clamped(profile, table.end_mm + dmax)
        backing = _backing_series_id(vd.id, product_id)
        channels = []
        for name in sorted(table.columns):
            channels.append(Channel(name, ValueType.FLOAT64))
            channels.append(Channel(f"{name}.t", ValueType.INT64))
        if vd.index_mode == IndexMode.AUX_TIME:
            channels.append(Channel(BACKING_AUX_CHANNEL, ValueType.INT64))
        schema = SeriesSchema(id=backing, channels=tuple(channels),
                              index_kind=IndexKind.LENGTH, series_kind=SeriesKind.DERIVED)
        if not self.registry.has_series(backing):
            self.registry.define_series(schema)
        elif [(c.name, c.value_type) for c in self.registry.get_schema(backing).channels] != \
                [(c.name, c.value_type) for c in channels]:
            self.store.drop_series(backing)
            self.registry.redefine_series(schema)
        self.store.delete_range(backing, UNBOUNDED)
        points = []
        for i in range(len(table)):
            values: dict = {}
            for name, col in table.columns.items():
                if col.mask[i]:
                    values[name] = float(col.values[i])
                    values[f"{name}.t"] = int(col.prov_ns[i])
            if vd.index_mode == IndexMode.AUX_TIME:
                values[BACKING_AUX_CHANNEL] = int(table.index[i])
            if values:
                points.append(DataPoint(int(table.positions[i]), values))
        if points:
            self.store.append(DataBatch(backing, points))
        self.registry.set_static_metadata(backing, {
            "view.id": vd.id,
            "view.product": product_id,
            "view.start_mm": str(table.start_mm),
            "view.end_mm": str(table.end_mm),
            "view.source_version": str(source_version),
            "view.cut_version": str(cut_version),
            "view.dep_end": str(dep_end),
        })

    def _load_table(self, vd: ViewDefinition, product_id: str) -> ProductTable:
        backing = _backing_series_id(vd.id, product_id)
        meta = self.registry.get_schema(backing).static_metadata
        start_mm = int(meta["view.start_mm"])
        end_mm = int(meta["view.end_mm"])
        product_len = end_mm - start_mm
        n_rows = (product_len + vd.step_mm - 1) // vd.step_mm
        positions = np.arange(n_rows, dtype=np.int64) * vd.step_mm
        block = self.store.snapshot_block(backing)
        pos_map = np.searchsorted(positions, block.index)
        names = sorted({n for n in block.columns if not n.endswith(".t") and n != BACKING_AUX_CHANNEL})
        columns = {}
        for name in names:
            vals = np.zeros(n_rows, dtype=np.float64)
            mask = np.zeros(n_rows, dtype=np.bool_)
            prov = np.zeros(n_rows, dtype=np.int64)
            vcol = block.columns[name]
            tcol = block.columns[f"{name}.t"]
            sel = vcol.mask
            vals[pos_map[sel]] = vcol.values[sel]
            mask[pos_map[sel]] = True
            prov[pos_map[sel]] = tcol.values[sel]
            columns[name] = ProductColumn(vals, mask, prov)
        if vd.index_mode == IndexMode.AUX_TIME:
            index = np.zeros(n_rows, dtype=np.int64)
            acol = block.columns[BACKING_AUX_CHANNEL]
            index[pos_map[acol.mask]] = acol.values[acol.mask]
        else:
            index = positions
        return ProductTable(product_id, vd.id, start_mm, end_mm, vd.step_mm,
                            vd.index_mode, positions, index, columns)
