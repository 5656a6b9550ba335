"""Service configuration: file loading and payload validation.

The same validators back the config file and the admin PUT endpoints, so
both report precise error locations like ``policies[2].value``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from castline import errors
from castline.connectors import BoundSegment, SegmentBinding
from castline.model import (
    IndexRange,
    PolicyKind,
    PolicyLevelKey,
    RollupRule,
    attribute_level,
    global_level,
    type_level,
)
from castline.timeutil import parse_duration_ns, parse_timestamp_ns
from castline.views import CutEvent, IndexMode, Materialization, SensorOffset, ViewDefinition


@dataclass
class PolicyDecl:
    kind: PolicyKind
    level: PolicyLevelKey
    value: Any

    def as_dict(self) -> dict:
        value = self.value
        if self.kind == PolicyKind.ROLLUP:
            value = [r.as_dict() for r in value]
        return {"kind": self.kind.value, "level": list(self.level), "value": value}


@dataclass
class ServiceConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8300
    data_dir: Optional[str] = None
    fsync: bool = True
    maintenance_interval_s: Optional[float] = None
    stream_batch_size: int = 1000
    views_enabled: bool = True
    policies: list[PolicyDecl] = field(default_factory=list)
    views: list[ViewDefinition] = field(default_factory=list)
    bindings: list[SegmentBinding] = field(default_factory=list)


_REQUIRED = object()


def _expect(value, types, path: str, what: str):
    if not isinstance(value, types):
        raise errors.ConfigError(path, f"expected {what}, got {type(value).__name__}")
    return value


def _get(d: dict, key: str, path: str, types, what: str, default=_REQUIRED):
    if key not in d:
        if default is not _REQUIRED:
            return default
        raise errors.ConfigError(f"{path}.{key}", "required field missing")
    return _expect(d[key], types, f"{path}.{key}", what)


def parse_retention(value, path: str) -> Optional[int]:
    if value in ("forever", None):
        return None
    if isinstance(value, bool):
        raise errors.ConfigError(path, "retention must be a duration or 'forever'")
    try:
        ns = parse_duration_ns(value)
    except (ValueError, TypeError) as exc:
        raise errors.ConfigError(path, str(exc)) from None
    return ns


def parse_rollup_rules(value, path: str) -> tuple[RollupRule, ...]:
    _expect(value, list, path, "a list of rollup rules")
    rules = []
    for i, item in enumerate(value):
        rpath = f"{path}[{i}]"
        _expect(item, dict, rpath, "a rollup rule object")
        res_raw = _get(item, "resolution", rpath, (str, int), "a duration")
        try:
            resolution = parse_duration_ns(res_raw)
        except ValueError as exc:
            raise errors.ConfigError(f"{rpath}.resolution", str(exc)) from None
        functions = _get(item, "functions", rpath, list, "a list of aggregate functions")
        try:
            rule = RollupRule(
                resolution_ns=resolution,
                functions=frozenset(functions),
                retention_ns=parse_retention(item.get("retention", "forever"), f"{rpath}.retention"),
            )
        except errors.InvalidResolution as exc:
            raise errors.ConfigError(rpath, str(exc)) from None
        except ValueError as exc:
            raise errors.ConfigError(f"{rpath}.functions", str(exc)) from None
        rules.append(rule)
    return tuple(rules)


def parse_policy(item, path: str) -> PolicyDecl:
    _expect(item, dict, path, "a policy object")
    kind_raw = _get(item, "kind", path, str, "a policy kind")
    try:
        kind = PolicyKind(kind_raw)
    except ValueError:
        raise errors.ConfigError(
            f"{path}.kind", f"unknown policy kind {kind_raw!r} "
            f"(expected one of {[k.value for k in PolicyKind]})") from None
    level_raw = _get(item, "level", path, str, "a level name")
    if level_raw == "global":
        level = global_level()
    elif level_raw == "type":
        level = type_level(_get(item, "asset_type", path, str, "an asset type"))
    elif level_raw == "attribute":
        level = attribute_level(_get(item, "series", path, str, "a series id"),
                                _get(item, "channel", path, str, "a channel name"))
    else:
        raise errors.ConfigError(f"{path}.level",
                                 f"unknown level {level_raw!r} (expected global/type/attribute)")
    raw_value = item.get("value")
    if kind == PolicyKind.HISTORIZATION:
        value = _expect(raw_value, bool, f"{path}.value", "a bool")
    elif kind == PolicyKind.RETENTION:
        value = parse_retention(raw_value, f"{path}.value")
    else:
        value = parse_rollup_rules(raw_value, f"{path}.value")
    return PolicyDecl(kind, level, value)


def parse_policies(items, path: str = "policies") -> list[PolicyDecl]:
    _expect(items, list, path, "a list")
    return [parse_policy(item, f"{path}[{i}]") for i, item in enumerate(items)]


def parse_view(item, path: str) -> ViewDefinition:
    _expect(item, dict, path, "a view object")
    view_id = _get(item, "id", path, str, "a view id")
    source = _get(item, "source_series", path, str, "a series id")
    step = _get(item, "step_mm", path, int, "a positive integer")
    if isinstance(step, bool) or step <= 0:
        raise errors.ConfigError(f"{path}.step_mm", f"must be a positive integer, got {step!r}")
    offsets_raw = _get(item, "offsets", path, list, "a list of sensor offsets")
    offsets = []
    for i, off in enumerate(offsets_raw):
        opath = f"{path}.offsets[{i}]"
        _expect(off, dict, opath, "an offset object")
        channel = _get(off, "channel", opath, str, "a channel name")
        offset_mm = _get(off, "offset_mm", opath, int, "a non-negative integer")
        try:
            offsets.append(SensorOffset(channel, offset_mm))
        except errors.InvalidDefinition as exc:
            raise errors.ConfigError(opath, str(exc)) from None
    cuts_raw = item.get("cuts") or []
    cuts = []
    for i, cut in enumerate(cuts_raw):
        cpath = f"{path}.cuts[{i}]"
        _expect(cut, dict, cpath, "a cut object")
        try:
            cuts.append(CutEvent(_get(cut, "product_id", cpath, str, "a product id"),
                                 _get(cut, "start_mm", cpath, int, "an integer"),
                                 _get(cut, "end_mm", cpath, int, "an integer")))
        except errors.OverlappingCuts as exc:
            raise errors.ConfigError(cpath, str(exc)) from None
    mode_raw = item.get("index_mode", "position")
    try:
        index_mode = IndexMode(mode_raw)
    except ValueError:
        raise errors.ConfigError(f"{path}.index_mode",
                                 f"expected 'position' or 'aux_time', got {mode_raw!r}") from None
    mat_raw = item.get("materialization", "on_demand")
    try:
        materialization = Materialization(mat_raw)
    except ValueError:
        raise errors.ConfigError(f"{path}.materialization",
                                 f"expected 'on_demand' or 'materialized', got {mat_raw!r}") from None
    return ViewDefinition(
        id=view_id,
        source_series=source,
        speed_channel=item.get("speed_channel", ""),
        offsets=tuple(offsets),
        step_mm=step,
        cut_series=item.get("cut_series"),
        cuts=tuple(cuts),
        index_mode=index_mode,
        materialization=materialization,
        length_channel=item.get("length_channel"),
        l0_mm=item.get("l0_mm", 0),
    )


def parse_views(items, path: str = "views") -> list[ViewDefinition]:
    _expect(items, list, path, "a list")
    return [parse_view(item, f"{path}[{i}]") for i, item in enumerate(items)]


def _parse_bound(value, path: str) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, bool):
        raise errors.ConfigError(path, "expected a timestamp or null")
    try:
        return parse_timestamp_ns(value)
    except (ValueError, TypeError) as exc:
        raise errors.ConfigError(path, str(exc)) from None


def parse_binding(item, path: str) -> SegmentBinding:
    _expect(item, dict, path, "a binding object")
    series_id = _get(item, "series_id", path, str, "a series id")
    segments_raw = _get(item, "segments", path, list, "a list of segments")
    segments = []
    for i, seg in enumerate(segments_raw):
        spath = f"{path}.segments[{i}]"
        _expect(seg, dict, spath, "a segment object")
        kind = _get(seg, "kind", spath, str, "a connector kind")
        rng = seg.get("range") or {}
        _expect(rng, dict, f"{spath}.range", "a range object")
        start = _parse_bound(rng.get("start"), f"{spath}.range.start")
        end = _parse_bound(rng.get("end"), f"{spath}.range.end")
        try:
            index_range = IndexRange(start, end)
        except errors.InvalidRange as exc:
            raise errors.ConfigError(f"{spath}.range", str(exc)) from None
        config = seg.get("config") or {}
        _expect(config, dict, f"{spath}.config", "a config object")
        segments.append(BoundSegment(index_range, kind, dict(config)))
    return SegmentBinding(series_id, segments)


def parse_bindings(items, path: str = "bindings") -> list[SegmentBinding]:
    _expect(items, list, path, "a list")
    return [parse_binding(item, f"{path}[{i}]") for i, item in enumerate(items)]


def build_config(data: dict, base_dir: Path | None = None) -> ServiceConfig:
    _expect(data, dict, "<root>", "a mapping")
    cfg = ServiceConfig()
    listen = data.get("listen", f"{cfg.listen_host}:{cfg.listen_port}")
    _expect(listen, str, "listen", "host:port")
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise errors.ConfigError("listen", f"expected host:port, got {listen!r}")
    cfg.listen_host, cfg.listen_port = host, int(port)
    data_dir = data.get("data_dir")
    if data_dir is not None:
        _expect(data_dir, str, "data_dir", "a path")
        if base_dir is not None and not Path(data_dir).is_absolute():
            data_dir = str(base_dir / data_dir)
        cfg.data_dir = data_dir
    cfg.fsync = _get(data, "fsync", "<root>", bool, "a bool", default=True)
    interval = data.get("maintenance_interval_s")
    if interval is not None:
        _expect(interval, (int, float), "maintenance_interval_s", "seconds")
        cfg.maintenance_interval_s = float(interval)
    batch = _get(data, "stream_batch_size", "<root>", int, "an integer", default=1000)
    if batch <= 0:
        raise errors.ConfigError("stream_batch_size", f"must be > 0, got {batch}")
    cfg.stream_batch_size = batch
    features = data.get("features") or {}
    _expect(features, dict, "features", "a mapping")
    cfg.views_enabled = _get(features, "views", "features", bool, "a bool", default=True)
    cfg.policies = parse_policies(data.get("policies", []))
    cfg.views = parse_views(data.get("views", []))
    cfg.bindings = parse_bindings(data.get("bindings", []))
    return cfg


def load_config(path: str | Path) -> ServiceConfig:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise errors.ConfigError(str(path), f"cannot read config: {exc}") from None
    try:
        data = yaml.safe_load(raw) or {}
    except yaml.YAMLError as exc:
        raise errors.ConfigError(str(path), f"invalid YAML: {exc}") from None
    return build_config(data, base_dir=path.resolve().parent)
