"""Automated rollup generation, retention cleanup, and the level planner.

Rollup targets are ordinary derived series named ``<source>::rollup::<ns>``
with one column per (source channel, materialized function); a mean rule
materializes sum+count columns so coarser levels re-aggregate exactly.
Only fully closed buckets are written; re-running over unchanged data
writes nothing.

Within one maintenance cycle run_rollup must precede run_retention so
aggregates exist before the raw points feeding them are purged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from castline import errors
from castline.model import (
    AggregateFunction,
    Channel,
    IndexRange,
    PolicyKind,
    PolicyLevelKey,
    Registry,
    RollupRule,
    SeriesKind,
    SeriesSchema,
    ValueType,
)
from castline.store import Column, DataBatch, DataBlock, DataPoint, Store
from castline.timeutil import resolution_label

log = logging.getLogger(__name__)

ROLLUP_SOURCE_META = "rollup.source"
ROLLUP_RESOLUTION_META = "rollup.resolution_ns"


def target_series_id(source_id: str, resolution_ns: int) -> str:
    return f"{source_id}::rollup::{resolution_ns}"


def materialized_functions(functions: frozenset[AggregateFunction]) -> list[AggregateFunction]:
    """Columns actually stored for a rule; mean becomes sum+count."""
    mats = set()
    for fn in functions:
        if fn == AggregateFunction.MEAN:
            mats.add(AggregateFunction.SUM)
            mats.add(AggregateFunction.COUNT)
        else:
            mats.add(fn)
    return sorted(mats, key=lambda f: f.value)


def _required_columns(channel: str, fn: AggregateFunction) -> list[str]:
    if fn == AggregateFunction.MEAN:
        return [f"{channel}.sum", f"{channel}.count"]
    return [f"{channel}.{fn.value}"]


@dataclass(frozen=True)
class QueryPlan:
    """Chosen aggregation level for a query; None resolution means raw."""

    resolution_ns: Optional[int]
    reason: str
    mandatory: bool = False

    @property
    def is_raw(self) -> bool:
        return self.resolution_ns is None

    def label(self) -> str:
        return "raw" if self.is_raw else resolution_label(self.resolution_ns)

    def as_dict(self) -> dict:
        return {"level": self.label(), "resolution_ns": self.resolution_ns,
                "reason": self.reason, "mandatory": self.mandatory}


@dataclass
class RollupRunResult:
    written: int = 0
    failures: list[str] = field(default_factory=list)


class RollupEngine:
    def __init__(self, registry: Registry, store: Store):
        self.registry = registry
        self.store = store

    # -- configuration -------------------------------------------------------

    def define_rollup(self, level: PolicyLevelKey, rule: RollupRule) -> None:
        """Add (or replace, per resolution) a rollup rule at a policy level."""
        existing = self.registry.policy_at(PolicyKind.ROLLUP, level) or ()
        rules = tuple(r for r in existing if r.resolution_ns != rule.resolution_ns) + (rule,)
        self.registry.set_policy(PolicyKind.ROLLUP, level, rules)

    def effective_rules(self, series_id: str, channel: str,
                        asset_type: str | None = None) -> tuple[RollupRule, ...]:
        return tuple(self.registry.effective_policy(series_id, channel, PolicyKind.ROLLUP,
                                                    asset_type=asset_type))

    def source_series_ids(self) -> list[str]:
        return [s.id for s in self.registry.list_series()
                if ROLLUP_SOURCE_META not in s.static_metadata]

    def stored_levels(self, source_id: str) -> list[tuple[int, SeriesSchema]]:
        """(resolution, target schema) pairs for a source, coarsest first."""
        levels = []
        for schema in self.registry.list_series():
            if schema.static_metadata.get(ROLLUP_SOURCE_META) != source_id:
                continue
            levels.append((int(schema.static_metadata[ROLLUP_RESOLUTION_META]), schema))
        levels.sort(key=lambda pair: -pair[0])
        return levels

    def _ensure_target(self, source_schema: SeriesSchema, rule: RollupRule) -> str:
        target = target_series_id(source_schema.id, rule.resolution_ns)
        if self.registry.has_series(target):
            return target
        channels = []
        for ch in source_schema.channels:
            if not ch.value_type.numeric:
                continue
            for fn in materialized_functions(rule.functions):
                vt = ValueType.INT64 if fn == AggregateFunction.COUNT else ValueType.FLOAT64
                channels.append(Channel(f"{ch.name}.{fn.value}", vt, unit=ch.unit))
        if not channels:
            raise errors.InvalidResolution(
                f"series {source_schema.id!r} has no numeric channels to roll up")
        self.registry.define_series(SeriesSchema(
            id=target,
            channels=tuple(channels),
            index_kind=source_schema.index_kind,
            series_kind=SeriesKind.DERIVED,
            static_metadata={ROLLUP_SOURCE_META: source_schema.id,
                             ROLLUP_RESOLUTION_META: str(rule.resolution_ns)},
        ))
        return target

    # -- rollup generation ------------------------------------------------------

    def run_rollup(self, now: int) -> RollupRunResult:
        """Materialize every closed, not-yet-written bucket; idempotent."""
        result = RollupRunResult()
        written: set[tuple[str, int]] = set()
        for series_id in self.source_series_ids():
            schema = self.registry.get_schema(series_id)
            for ch in schema.channels:
                if not ch.value_type.numeric:
                    continue
                try:
                    rules = self.effective_rules(series_id, ch.name)
                except errors.CastlineError as exc:
                    result.failures.append(f"{series_id}/{ch.name}: {exc}")
                    continue
                for rule in rules:
                    try:
                        self._roll_channel(schema, ch.name, rule, now, written)
                    except errors.CastlineError as exc:
                        result.failures.append(
                            f"{series_id}/{ch.name}@{rule.resolution_ns}: {exc}")
        result.written = len(written)
        for failure in result.failures:
            log.warning("rollup failure: %s", failure)
        return result

    def _roll_channel(self, schema: SeriesSchema, channel: str, rule: RollupRule,
                      now: int, written: set) -> None:
        res = rule.resolution_ns
        closed_end = (now // res) * res
        target = self._ensure_target(schema, rule)
        mats = materialized_functions(rule.functions)
        probe_col = f"{channel}.{mats[0].value}"
        last = self.store.last_value_index(target, probe_col)
        if last is not None:
            start = last + res
        else:
            first = self.store.first_index(schema.id)
            if first is None:
                return
            start = (first // res) * res
        if start >= closed_end:
            return
        reach = IndexRange(start, closed_end)
        rows = self._compute_buckets(schema.id, channel, mats, res, reach)
        if rows is None:
            raise errors.Unanswerable(
                f"no source level covers [{start}, {closed_end}) for {schema.id}/{channel}")
        starts, columns = rows
        if starts.shape[0] == 0:
            return
        points = []
        for i, b in enumerate(starts):
            values = {f"{channel}.{fn.value}": columns[fn.value][i] for fn in mats}
            points.append(DataPoint(int(b), values))
        self.store.append(DataBatch(target, points))
        written.update((target, int(b)) for b in starts)

    def _compute_buckets(self, source_id: str, channel: str, mats: list[AggregateFunction],
                         res: int, reach: IndexRange):
        """Bucket values from the finest source level covering ``reach``."""
        wm = self.store.watermark(source_id)
        if wm is None or wm <= reach.start:
            starts = None
            columns: dict[str, list] = {}
            for fn in mats:
                block = self.store.aggregate_query(source_id, reach, res, fn, [channel])
                starts = block.index
                col = block.columns[channel]
                columns[fn.value] = [v.item() for v in col.values]
            return starts, columns
        # raw purged: compose from the finest finer rollup level that still covers
        for res2, schema2 in sorted(self.stored_levels(source_id), key=lambda p: p[0]):
            if res2 >= res or res % res2 != 0:
                continue
            cols2 = set(schema2.channel_names())
            if any(c not in cols2 for fn in mats for c in _required_columns(channel, fn)):
                continue
            wm2 = self.store.watermark(schema2.id)
            if wm2 is not None and wm2 > reach.start:
                continue
            return self._rebucket(schema2.id, channel, mats, res, reach)
        return None

    def _rebucket(self, level_id: str, channel: str, mats: list[AggregateFunction],
                  res: int, reach: IndexRange):
        starts = None
        columns: dict[str, list] = {}
        for fn in mats:
            starts_fn, values = self._rebucket_function(level_id, channel, fn, res, reach)
            starts = starts_fn
            columns[fn.value] = values
        return starts, columns

    def _rebucket_function(self, level_id: str, channel: str, fn: AggregateFunction,
                           res: int, reach: IndexRange) -> tuple[np.ndarray, list]:
        """Re-aggregate one stored function column into coarser buckets."""
        compose = {
            AggregateFunction.SUM: AggregateFunction.SUM,
            AggregateFunction.COUNT: AggregateFunction.SUM,
            AggregateFunction.MIN: AggregateFunction.MIN,
            AggregateFunction.MAX: AggregateFunction.MAX,
            AggregateFunction.FIRST: AggregateFunction.FIRST,
            AggregateFunction.LAST: AggregateFunction.LAST,
        }[fn]
        col = f"{channel}.{fn.value}"
        block = self.store.aggregate_query(level_id, reach, res, compose, [col])
        values = [v.item() for v in block.columns[col].values]
        if fn == AggregateFunction.COUNT:
            values = [int(v) for v in values]
        return block.index, values

    # -- retention ----------------------------------------------------------------

    def run_retention(self, now: int) -> int:
        """Purge data older than each level's effective retention."""
        deleted = 0
        for series_id in self.source_series_ids():
            schema = self.registry.get_schema(series_id)
            retentions: dict[str, Optional[int]] = {}
            for ch in schema.channels:
                retentions[ch.name] = self.registry.effective_policy(
                    series_id, ch.name, PolicyKind.RETENTION)
            distinct = set(retentions.values())
            if distinct == {None}:
                continue
            if len(distinct) == 1:
                cutoff = now - next(iter(distinct))
                deleted += self.store.delete_range(series_id, IndexRange(None, cutoff))
                self.store.raise_watermark(series_id, cutoff)
                continue
            for ch_name, retention in retentions.items():
                if retention is None:
                    continue
                cutoff = now - retention
                _, removed = self.store.clear_channel_range(series_id, ch_name,
                                                            IndexRange(None, cutoff))
                deleted += removed
            if None not in distinct:
                self.store.raise_watermark(series_id, now - max(distinct))
        deleted += self._rollup_retention(now)
        return deleted

    def _rollup_retention(self, now: int) -> int:
        deleted = 0
        for series_id in self.source_series_ids():
            schema = self.registry.get_schema(series_id)
            for res, target_schema in self.stored_levels(series_id):
                retentions = set()
                for ch in schema.channels:
                    if not ch.value_type.numeric:
                        continue
                    for rule in self.effective_rules(series_id, ch.name):
                        if rule.resolution_ns == res:
                            retentions.add(rule.retention_ns)
                if not retentions or None in retentions:
                    continue
                cutoff = now - max(retentions)
                deleted += self.store.delete_range(target_schema.id, IndexRange(None, cutoff))
                self.store.raise_watermark(target_schema.id, cutoff)
        return deleted

    # -- query planning ----------------------------------------------------------

    def plan_query(self, series_id: str, index_range: IndexRange,
                   resolution_ns: Optional[int], function: AggregateFunction | str | None,
                   channels: Optional[list[str]] = None) -> QueryPlan:
        """Pick the coarsest stored level that can answer exactly; else raw.

        A level qualifies when its resolution divides the requested one and
        the requested function composes from its stored columns. When raw
        data in the range was purged and a qualifying level still covers it,
        that level is mandatory.
        """
        schema = self.registry.get_schema(series_id)
        wm = self.store.watermark(series_id)
        req_start = index_range.start
        purged_some = wm is not None and (req_start is None or req_start < wm)
        purged_all = wm is not None and index_range.end is not None and index_range.end <= wm
        if resolution_ns is None:
            if purged_all:
                raise errors.Unanswerable(
                    f"raw points below watermark {wm} were purged and no level serves points")
            reason = "raw points requested"
            if purged_some:
                reason += f" (range below watermark {wm} was purged)"
            return QueryPlan(None, reason)
        if resolution_ns <= 0:
            raise errors.InvalidResolution(f"resolution must be > 0, got {resolution_ns}")
        fn = AggregateFunction(function)
        names = channels if channels is not None else \
            [ch.name for ch in schema.channels if ch.value_type.numeric]
        qualifying = []
        for res, target_schema in self.stored_levels(series_id):
            if resolution_ns % res != 0:
                continue
            cols = set(target_schema.channel_names())
            if any(c not in cols for name in names for c in _required_columns(name, fn)):
                continue
            qualifying.append((res, target_schema))
        if purged_some:
            covering = [(res, ts) for res, ts in qualifying
                        if self._covers(ts.id, req_start)]
            if covering:
                res, _ = covering[0]
                return QueryPlan(res, f"raw purged below {wm}; {resolution_label(res)} level "
                                      f"covers the range", mandatory=True)
            if purged_all:
                raise errors.Unanswerable(
                    f"range purged below watermark {wm} and no qualifying rollup covers it")
            if qualifying:
                res, _ = qualifying[0]
                return QueryPlan(res, f"{resolution_label(res)} level divides "
                                      f"{resolution_label(resolution_ns)}")
            return QueryPlan(None, f"no qualifying rollup; raw data below {wm} was purged")
        if qualifying:
            res, _ = qualifying[0]
            return QueryPlan(res, f"coarsest stored level dividing "
                                  f"{resolution_label(resolution_ns)} is {resolution_label(res)}")
        divisor_issue = any(resolution_ns % res != 0 for res, _ in self.stored_levels(series_id))
        reason = "no stored level qualifies"
        if divisor_issue:
            reason += " (stored resolutions do not divide the requested one)"
        return QueryPlan(None, reason + "; answering from raw")

    def _covers(self, target_id: str, req_start: Optional[int]) -> bool:
        wm = self.store.watermark(target_id)
        if wm is None:
            return True
        return req_start is not None and wm <= req_start

    def aggregate(self, series_id: str, index_range: IndexRange, resolution_ns: int,
                  function: AggregateFunction | str,
                  channels: Optional[list[str]] = None) -> tuple[QueryPlan, DataBlock]:
        """Plan and execute an aggregate query.

        Rollup-backed answers are exact for ranges aligned to the chosen
        level's resolution (the normal "weekly averages" pattern).
        """
        fn = AggregateFunction(function)
        plan = self.plan_query(series_id, index_range, resolution_ns, fn, channels)
        if plan.is_raw:
            return plan, self.store.aggregate_query(series_id, index_range, resolution_ns,
                                                    fn, channels)
        schema = self.registry.get_schema(series_id)
        names = channels if channels is not None else \
            [ch.name for ch in schema.channels if ch.value_type.numeric]
        target = target_series_id(series_id, plan.resolution_ns)
        per_channel: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name in names:
            starts, values = self._compose_channel(target, name, fn, resolution_ns, index_range)
            per_channel[name] = (starts, values)
        return plan, _merge_channel_buckets(per_channel, fn)

    def _compose_channel(self, target: str, channel: str, fn: AggregateFunction,
                         resolution_ns: int, index_range: IndexRange):
        if fn == AggregateFunction.MEAN:
            s_idx, sums = self._rebucket_function(target, channel, AggregateFunction.SUM,
                                                  resolution_ns, index_range)
            _, counts = self._rebucket_function(target, channel, AggregateFunction.COUNT,
                                                resolution_ns, index_range)
            values = np.asarray(sums, dtype=np.float64) / np.asarray(counts, dtype=np.float64)
            return s_idx, values
        starts, values = self._rebucket_function(target, channel, fn, resolution_ns, index_range)
        dtype = np.int64 if fn == AggregateFunction.COUNT else np.float64
        return starts, np.asarray(values, dtype=dtype)


def _merge_channel_buckets(per_channel: dict[str, tuple[np.ndarray, np.ndarray]],
                           fn: AggregateFunction) -> DataBlock:
    if not per_channel:
        return DataBlock(np.empty(0, dtype=np.int64), {})
    all_starts = np.unique(np.concatenate([s for s, _ in per_channel.values()]))
    columns = {}
    for name, (starts, values) in per_channel.items():
        dtype = np.int64 if fn == AggregateFunction.COUNT else np.float64
        fill = 0 if dtype == np.int64 else np.nan
        out = np.full(all_starts.shape[0], fill, dtype=dtype)
        mask = np.zeros(all_starts.shape[0], dtype=np.bool_)
        pos = np.searchsorted(all_starts, starts)
        out[pos] = values
        mask[pos] = True
        columns[name] = Column(out, mask)
    return DataBlock(all_starts, columns)
