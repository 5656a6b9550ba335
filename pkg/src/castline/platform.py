"""Platform facade: wires registry, store, rollups, views and federation.

Query routing lives here: federated series go through their segment
binding, aggregate requests go through the level planner, asset-scoped
queries are clamped to the reference subrange. Registry state plus view
and binding declarations persist to ``<data_dir>/state.json``; series data
persists under the store's per-series directories.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Optional

from castline import errors
from castline.connectors import Federation, SegmentBinding
from castline.model import (
    AggregateFunction,
    Asset,
    IndexRange,
    PolicyKind,
    Registry,
    SeriesReference,
    SeriesSchema,
)
from castline.rollup import QueryPlan, RollupEngine
from castline.store import DataBatch, DataBlock, QueryResult, QuerySpec, Store, page_block
from castline.views import Materialization, ViewDefinition, ViewEngine

log = logging.getLogger(__name__)


class Platform:
    def __init__(self, data_dir: str | Path | None = None, fsync: bool = True):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self._state_path = self.data_dir / "state.json" if self.data_dir else None
        self._save_lock = threading.Lock()
        self._restoring = True
        self.registry = Registry(on_change=self._save_state)
        if self._state_path is not None and self._state_path.exists():
            state = json.loads(self._state_path.read_text(encoding="utf-8"))
            self.registry.restore(state.get("registry", {}))
        else:
            state = {}
        store_dir = self.data_dir / "series" if self.data_dir else None
        self.store = Store(self.registry, store_dir, fsync=fsync)
        self.rollups = RollupEngine(self.registry, self.store)
        self.federation = Federation(self.registry, self.store, on_change=self._save_state)
        self.views = ViewEngine(self.registry, self.store, reader=self.read_block,
                                on_change=self._save_state)
        for binding in state.get("bindings", []):
            self.federation.bind_segments(SegmentBinding.from_dict(binding))
        for vd in state.get("views", []):
            self.views.define_view(ViewDefinition.from_dict(vd))
        self._restoring = False
        self._maintenance_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    @classmethod
    def in_memory(cls) -> "Platform":
        return cls(data_dir=None)

    @classmethod
    def open(cls, data_dir: str | Path, fsync: bool = True) -> "Platform":
        return cls(data_dir=data_dir, fsync=fsync)

    # -- persistence -----------------------------------------------------------

    def _save_state(self) -> None:
        if self._state_path is None or self._restoring:
            return
        with self._save_lock:
            payload = {
                "registry": self.registry.as_dict(),
                "views": [vd.as_dict() for vd in self.views.list_views()] if hasattr(self, "views") else [],
                "bindings": [b.as_dict() for b in self.federation.bindings()] if hasattr(self, "federation") else [],
            }
            tmp = self._state_path.with_suffix(".json.tmp")
            self._state_path.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
            os.replace(tmp, self._state_path)

    # -- config application ---------------------------------------------------------

    def apply_config(self, cfg) -> None:
        self.replace_policies(cfg.policies, replace=True)
        self.replace_views(cfg.views, replace=True)
        self.replace_bindings(cfg.bindings, replace=True)

    def replace_policies(self, decls, replace: bool = False) -> None:
        if replace:
            self.registry.clear_policies()
        for decl in decls:
            self.registry.set_policy(decl.kind, decl.level, decl.value)

    def replace_views(self, definitions, replace: bool = False) -> None:
        if replace:
            self.views.drop_all_views()
        for vd in definitions:
            self.views.define_view(vd)

    def replace_bindings(self, bindings, replace: bool = False) -> None:
        if replace:
            self.federation.clear_bindings()
        for binding in bindings:
            self.federation.bind_segments(binding)

    # -- data path -------------------------------------------------------------------

    def append(self, batch: DataBatch) -> int:
        if batch.points and self.federation.is_bound(batch.series_id):
            self.federation.validate_write(batch.series_id, batch.points[0].index,
                                           batch.points[-1].index)
        return self.store.append(batch)

    def read_block(self, series_id: str, index_range: IndexRange,
                   channels: Optional[list[str]] = None) -> DataBlock:
        """Unpaged columnar read, federation-aware (the views engine reads here)."""
        if self.federation.is_bound(series_id):
            return self.federation.query(series_id, QuerySpec(range=index_range,
                                                              channels=channels)).block
        return self.store.snapshot_block(series_id, index_range, channels)

    def query(self, series_id: str, spec: QuerySpec) -> tuple[Optional[dict], QueryResult]:
        """Route one query; returns plan info (aggregates only) and the result."""
        if spec.aggregation is not None:
            if self.federation.is_bound(series_id):
                rows = self.federation.aggregate(series_id, spec.range,
                                                 spec.aggregation.resolution_ns,
                                                 spec.aggregation.function, spec.channels)
                plan = {"level": "federated", "resolution_ns": None,
                        "reason": "aggregated across bound segments", "mandatory": False}
                return plan, page_block(rows, spec, kind="buckets")
            plan, rows = self.rollups.aggregate(series_id, spec.range,
                                                spec.aggregation.resolution_ns,
                                                spec.aggregation.function, spec.channels)
            return plan.as_dict(), page_block(rows, spec, kind="buckets")
        if self.federation.is_bound(series_id):
            return None, self.federation.query(series_id, spec)
        # surfaces Unanswerable when the requested raw range was purged entirely
        self.rollups.plan_query(series_id, spec.range, None, None, spec.channels)
        return None, self.store.query(series_id, spec)

    def query_via_asset(self, asset_id: str, spec: QuerySpec,
                        role: Optional[str] = None) -> tuple[str, Optional[dict], QueryResult]:
        """Query through an asset reference; the range clamps to the subrange."""
        refs = self.registry.references_of_asset(asset_id)
        if role is not None:
            refs = [r for r in refs if r.role == role]
        if not refs:
            detail = f" with role {role!r}" if role is not None else ""
            raise errors.UnknownSeries(f"asset {asset_id!r} has no series reference{detail}")
        ref = refs[0]
        clamped = spec.range.intersect(ref.effective_range())
        if clamped is None:
            schema = self.registry.get_schema(ref.series_id)
            empty = DataBlock.empty({ch.name: ch.value_type for ch in schema.channels})
            return ref.series_id, None, QueryResult(empty, None, "points")
        clamped_spec = QuerySpec(range=clamped, channels=spec.channels, limit=spec.limit,
                                 cursor=spec.cursor, aggregation=spec.aggregation)
        plan, result = self.query(ref.series_id, clamped_spec)
        return ref.series_id, plan, result

    # -- maintenance --------------------------------------------------------------------

    def maintenance(self, now: Optional[int] = None) -> dict:
        """One cycle: rollups first, then retention, then view refresh."""
        if now is None:
            now = time.time_ns()
        rollup_result = self.rollups.run_rollup(now)
        deleted = self.rollups.run_retention(now)
        refreshed = 0
        for vd in self.views.list_views():
            if vd.materialization == Materialization.MATERIALIZED:
                refreshed += self.views.refresh_materialized(vd.id)
        return {
            "buckets_written": rollup_result.written,
            "points_deleted": deleted,
            "views_refreshed": refreshed,
            "failures": rollup_result.failures,
        }

    def start_maintenance_driver(self, interval_s: float) -> None:
        if self._maintenance_thread is not None:
            return

        def loop():
            while not self._stop.wait(interval_s):
                try:
                    self.maintenance()
                except Exception:
                    log.exception("maintenance cycle failed")

        self._maintenance_thread = threading.Thread(target=loop, daemon=True,
                                                    name="castline-maintenance")
        self._maintenance_thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._maintenance_thread is not None:
            self._maintenance_thread.join(timeout=5)
            self._maintenance_thread = None
