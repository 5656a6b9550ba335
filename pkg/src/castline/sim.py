"""Continuous-casting simulator and the requirements conformance probe.

The simulator posts a deterministic synthetic casting run against a live
service: one multivariate process series (speed, water flow, temperatures
at several strand positions sharing each timestamp), cut events whenever
the integrated length at the cutter advances by one billet, and heat /
billet assets with nested sub-range references.

``conformance`` executes one live probe per platform requirement and
reports a fulfilment matrix; statuses come from the executed probes only.
"""

from __future__ import annotations

import csv
import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import httpx
import numpy as np
import yaml

from castline import errors
from castline.streams import decode_stream
from castline.timeutil import NS_PER_DAY, NS_PER_HOUR, NS_PER_MIN, NS_PER_S
from castline.views import SensorOffset, cumulative_length, invert_length

DEFAULT_URL = "http://127.0.0.1:8300"


@dataclass
class CastingScenario:
    duration_min: int = 60
    sample_interval_s: int = 1
    base_speed_m_min: float = 2.5
    speed_noise: float = 0.05
    sensors: tuple[SensorOffset, ...] = (
        SensorOffset("T_l", 0),
        SensorOffset("T_s_mid", 3000),
        SensorOffset("T_s_far", 8000),
    )
    cutter_offset_mm: int = 50000  # ~20 min mould-to-cut travel at 2.5 m/min
    billet_length_mm: int = 12000
    seed: int = 1
    start_ns: int = 0
    series_id: str = "cast-1"
    cut_series_id: str = "cast-1-cuts"
    machine_id: str = "caster-1"
    heat_id: str = "heat-1"
    batch_points: int = 600
    view_step_mm: int = 1000
    include_view: bool = True

    def __post_init__(self):
        if self.duration_min <= 0 or self.sample_interval_s <= 0:
            raise errors.InvalidScenario("duration and sample interval must be > 0")
        if self.base_speed_m_min < 0 or self.speed_noise < 0:
            raise errors.InvalidScenario("speed and noise must be >= 0")
        if self.billet_length_mm <= 0 or self.cutter_offset_mm < 0:
            raise errors.InvalidScenario("billet length must be > 0 and cutter offset >= 0")
        if not any(s.offset_mm == 0 for s in self.sensors):
            raise errors.InvalidScenario("scenario needs a mould sensor (offset 0)")

    @staticmethod
    def from_file(path: str | Path) -> "CastingScenario":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise errors.InvalidScenario(f"{path}: scenario file must be a mapping")
        if "sensors" in data:
            data["sensors"] = tuple(SensorOffset(s["channel"], int(s["offset_mm"]))
                                    for s in data["sensors"])
        try:
            return CastingScenario(**data)
        except TypeError as exc:
            raise errors.InvalidScenario(f"{path}: {exc}") from None


@dataclass
class SimOp:
    method: str
    path: str
    body: dict

    def body_bytes(self) -> bytes:
        return json.dumps(self.body, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class SimPlan:
    ops: list[SimOp]
    n_points: int
    n_cuts: int
    total_length_mm: int


def _smooth(noise: np.ndarray, window: int = 30) -> np.ndarray:
    if noise.shape[0] < 2 * window:
        return noise
    kernel = np.ones(window) / window
    return np.convolve(noise, kernel, mode="same")


def build_plan(scenario: CastingScenario) -> SimPlan:
    """Deterministic operation list for a scenario (fixed seed, fixed bytes)."""
    s = scenario
    rng = np.random.default_rng(s.seed)
    n = (s.duration_min * 60) // s.sample_interval_s
    t = s.start_ns + np.arange(n, dtype=np.int64) * (s.sample_interval_s * NS_PER_S)
    speed = s.base_speed_m_min * (1.0 + s.speed_noise * _smooth(rng.uniform(-1, 1, n)))
    speed = np.maximum(speed, 0.0)
    temps = {}
    for sensor in s.sensors:
        base = 1530.0 - 0.045 * sensor.offset_mm  # cooling along the strand
        temps[sensor.channel] = base + rng.normal(0.0, 2.0, n)
    q_w = 1200.0 + 40.0 * np.sin(np.arange(n) / 180.0) + rng.normal(0.0, 5.0, n)
    profile = cumulative_length(t, speed, 0)
    total_length = int(profile.l_mm[-1]) if n else 0

    channels = [{"name": "v_c", "value_type": "float64", "unit": "m/min",
                 "description": "casting speed"},
                {"name": "Q_w", "value_type": "float64", "unit": "L/min",
                 "description": "spray water flow"}]
    for sensor in s.sensors:
        channels.append({"name": sensor.channel, "value_type": "float64", "unit": "Cel",
                         "description": f"temperature at strand offset {sensor.offset_mm} mm"})
    ops = [
        SimOp("POST", "/assets", {"id": s.machine_id, "asset_type": "machine",
                                  "attributes": {"line": "demo"}}),
        SimOp("POST", "/series", {"id": s.series_id, "channels": channels,
                                  "index_kind": "time", "series_kind": "historical",
                                  "static_metadata": {"semantic": "historical process data"}}),
        SimOp("POST", "/series", {"id": s.cut_series_id, "channels": [
            {"name": "product", "value_type": "text", "unit": "", "description": "product id"},
            {"name": "start_mm", "value_type": "int64", "unit": "mm", "description": ""},
            {"name": "end_mm", "value_type": "int64", "unit": "mm", "description": ""}],
            "index_kind": "time", "series_kind": "historical", "static_metadata": {}}),
        SimOp("POST", "/references", {"asset_id": s.machine_id, "series_id": s.series_id,
                                      "subrange": None, "role": "process-data"}),
        SimOp("POST", "/assets", {"id": s.heat_id, "asset_type": "heat", "attributes": {}}),
        SimOp("POST", "/references", {"asset_id": s.heat_id, "series_id": s.series_id,
                                      "subrange": None, "role": "process-data"}),
    ]

    # cut events: the cutter sits cutter_offset_mm below the mould, so billet k
    # is complete when L reaches cutter_offset + (k+1) * billet_length
    cuts = []
    k = 0
    while s.cutter_offset_mm + (k + 1) * s.billet_length_mm <= total_length:
        cut_l = s.cutter_offset_mm + (k + 1) * s.billet_length_mm
        cuts.append((invert_length(profile, cut_l), k))
        k += 1

    batches = []
    for lo in range(0, n, s.batch_points):
        hi = min(lo + s.batch_points, n)
        points = []
        for i in range(lo, hi):
            values = {"v_c": float(speed[i]), "Q_w": float(q_w[i])}
            for sensor in s.sensors:
                values[sensor.channel] = float(temps[sensor.channel][i])
            points.append({"i": int(t[i]), "v": values})
        batches.append((int(t[hi - 1]), SimOp("POST", f"/series/{s.series_id}/data",
                                              {"points": points})))

    # interleave cut announcements with data batches by timestamp
    cut_ops: list[tuple[int, list[SimOp]]] = []
    for cut_t, idx in cuts:
        billet = f"billet-{s.heat_id.split('-')[-1]}-{idx + 1}"
        start_mm = idx * s.billet_length_mm
        end_mm = (idx + 1) * s.billet_length_mm
        sub_start = invert_length(profile, start_mm)
        sub_end = invert_length(profile, end_mm)
        group = [
            SimOp("POST", f"/series/{s.cut_series_id}/data", {"points": [
                {"i": int(cut_t), "v": {"product": billet, "start_mm": start_mm,
                                        "end_mm": end_mm}}]}),
            SimOp("POST", "/assets", {"id": billet, "asset_type": "billet", "attributes": {}}),
            SimOp("POST", "/references", {"asset_id": billet, "series_id": s.series_id,
                                          "subrange": {"start": int(sub_start),
                                                       "end": int(sub_end)},
                                          "role": "process-data"}),
        ]
        cut_ops.append((int(cut_t), group))

    bi, ci = 0, 0
    while bi < len(batches) or ci < len(cut_ops):
        if ci >= len(cut_ops) or (bi < len(batches) and batches[bi][0] <= cut_ops[ci][0]):
            ops.append(batches[bi][1])
            bi += 1
        else:
            ops.extend(cut_ops[ci][1])
            ci += 1

    if s.include_view:
        ops.append(SimOp("PUT", "/policies", {"policies": [
            {"kind": "historization", "level": "type", "asset_type": "machine", "value": True},
            {"kind": "rollup", "level": "type", "asset_type": "machine", "value": [
                {"resolution": "1h", "functions": ["mean", "min", "max"], "retention": "365d"}]},
        ]}))
        ops.append(SimOp("PUT", "/views", {"views": [{
            "id": "billet-view",
            "source_series": s.series_id,
            "speed_channel": "v_c",
            "offsets": [{"channel": sensor.channel, "offset_mm": sensor.offset_mm}
                        for sensor in s.sensors],
            "step_mm": s.view_step_mm,
            "cut_series": s.cut_series_id,
            "index_mode": "position",
            "materialization": "materialized",
        }]}))
    return SimPlan(ops, n_points=n, n_cuts=len(cuts), total_length_mm=total_length)


def simulate(scenario: CastingScenario, url: str = DEFAULT_URL,
             client: Optional[httpx.Client] = None) -> tuple[int, int]:
    """Run the scenario against a live service; returns (batches, cut events)."""
    plan = build_plan(scenario)
    own = client is None
    client = client or httpx.Client(base_url=url, timeout=60.0)
    batches = 0
    cuts = 0
    try:
        for op in plan.ops:
            try:
                resp = client.request(op.method, op.path,
                                      content=op.body_bytes(),
                                      headers={"content-type": "application/json"})
            except httpx.TransportError as exc:
                raise errors.ServiceUnreachable(f"cannot reach {url}: {exc}") from None
            if resp.status_code >= 300:
                raise errors.CastlineError(
                    f"{op.method} {op.path} failed with {resp.status_code}: {resp.text}")
            if op.path.endswith(f"/series/{scenario.series_id}/data"):
                batches += 1
            elif op.path.endswith(f"/series/{scenario.cut_series_id}/data"):
                cuts += 1
    finally:
        if own:
            client.close()
    return batches, cuts


# -- conformance -------------------------------------------------------------------


@dataclass
class ProbeResult:
    requirement: str
    title: str
    status: str  # fulfilled | partial | missing
    evidence: list[str] = field(default_factory=list)


@dataclass
class ConformanceReport:
    results: list[ProbeResult]
    note: str = ""

    def fulfilled(self) -> int:
        return sum(1 for r in self.results if r.status == "fulfilled")

    def as_dict(self) -> dict:
        return {"note": self.note,
                "results": [{"requirement": r.requirement, "title": r.title,
                             "status": r.status, "evidence": r.evidence}
                            for r in self.results]}

    def render(self) -> str:
        lines = ["requirement                         status     evidence",
                 "-" * 78]
        for r in self.results:
            label = f"{r.requirement} {r.title}"
            first = r.evidence[0] if r.evidence else ""
            lines.append(f"{label:<35} {r.status:<10} {first}")
            for extra in r.evidence[1:]:
                lines.append(f"{'':<47}{extra}")
        lines.append("-" * 78)
        lines.append(f"{self.fulfilled()}/10 fulfilled")
        if self.note:
            lines.append(self.note)
        return "\n".join(lines)


_TITLES = {
    "R1": "basic storage and query API",
    "R2": "streaming to clients",
    "R3": "multivariate timeseries",
    "R4": "historical data auto-storage",
    "R5": "retention and aggregation",
    "R6": "timeseries metadata",
    "R7": "beyond historical timeseries",
    "R8": "multiple references",
    "R9": "transformation views",
    "R10": "legacy data integration",
}


class ConformanceProbe:
    """Executes one live probe per requirement against a running service."""

    def __init__(self, url: str = DEFAULT_URL, client: Optional[httpx.Client] = None):
        self.url = url
        self.client = client or httpx.Client(base_url=url, timeout=30.0)

    # -- plumbing ---------------------------------------------------------

    def _req(self, method: str, path: str, body: dict | None = None,
             ok: tuple = (200,)) -> httpx.Response:
        resp = self.client.request(method, path, json=body)
        if resp.status_code not in ok:
            raise errors.CastlineError(
                f"{method} {path} -> {resp.status_code}: {resp.text[:200]}")
        return resp

    def _series(self, series_id: str, channels: list[tuple[str, str]],
                kind: str = "historical") -> None:
        self._req("POST", "/series", {
            "id": series_id,
            "channels": [{"name": n, "value_type": vt, "unit": "", "description": ""}
                         for n, vt in channels],
            "index_kind": "time", "series_kind": kind, "static_metadata": {}})

    def _post_points(self, series_id: str, points: list[dict]) -> None:
        self._req("POST", f"/series/{series_id}/data", {"points": points})

    def _fetch(self, path: str, params: dict | None = None):
        with self.client.stream("GET", path, params=params or {}) as resp:
            if resp.status_code != 200:
                resp.read()
                raise errors.CastlineError(f"GET {path} -> {resp.status_code}: {resp.text[:200]}")
            return decode_stream(resp.iter_lines())

    def _fetch_all_pages(self, path: str, params: dict) -> list[dict]:
        rows = []
        cursor = None
        while True:
            p = dict(params)
            if cursor:
                p["cursor"] = cursor
            _, page, footer = self._fetch(path, p)
            rows.extend(page)
            cursor = footer.get("cursor")
            if not cursor:
                return rows

    # -- probes -------------------------------------------------------------

    def probe_r1(self) -> ProbeResult:
        ev = []
        self._series("probe-r1", [("a", "float64"), ("b", "float64")])
        points = [{"i": k * NS_PER_MIN, "v": {"a": float(k), "b": float(10 * k)}}
                  for k in range(5)]
        self._post_points("probe-r1", points)
        _, rows, _ = self._fetch("/series/probe-r1/data",
                                 {"from": NS_PER_MIN, "to": 3 * NS_PER_MIN})
        assert [r["i"] for r in rows] == [NS_PER_MIN, 2 * NS_PER_MIN], rows
        ev.append("time-range filter returned exactly the in-range points")
        unpaged = self._fetch("/series/probe-r1/data", {})[1]
        paged = self._fetch_all_pages("/series/probe-r1/data", {"limit": 2})
        assert paged == unpaged and len(unpaged) == 5
        ev.append("cursor paging concatenates to the unpaged result")
        _, buckets, _ = self._fetch("/series/probe-r1/data",
                                    {"agg": "mean", "resolution": "5m"})
        assert buckets and abs(buckets[0]["v"]["a"] - 2.0) < 1e-12
        ev.append("server-side mean aggregation")
        return ProbeResult("R1", _TITLES["R1"], "fulfilled", ev)

    def probe_r2(self) -> ProbeResult:
        ev = []
        n = 2500
        self._series("probe-r2", [("x", "float64")])
        self._post_points("probe-r2", [{"i": k * NS_PER_S, "v": {"x": float(k)}}
                                       for k in range(n)])
        records = 0
        header_seen = False
        footer = None
        saw_record_before_end = False
        with self.client.stream("GET", "/series/probe-r2/data") as resp:
            if resp.status_code != 200:
                raise errors.CastlineError(f"stream failed: {resp.status_code}")
            for line in resp.iter_lines():
                rec = json.loads(line)
                if rec["type"] == "header":
                    header_seen = True
                elif rec["type"] == "point":
                    records += 1
                    if not resp.is_closed:
                        saw_record_before_end = True
                elif rec["type"] == "footer":
                    footer = rec
        assert header_seen and footer is not None
        assert footer["count"] == records == n
        ev.append(f"newline-delimited stream of {n} records")
        if saw_record_before_end:
            ev.append("records decodable before the response completes")
        ev.append(f"footer count {footer['count']} matches records, status {footer['status']}")
        return ProbeResult("R2", _TITLES["R2"], "fulfilled", ev)

    def probe_r3(self) -> ProbeResult:
        ev = []
        _, rows, _ = self._fetch("/series/probe-r1/data", {})
        assert all(set(r["v"]) == {"a", "b"} for r in rows)
        ev.append("one timestamp carries multiple named values")
        stats = self._req("GET", "/series/probe-r1/stats").json()
        assert stats["index_columns"] == 1 and stats["channels"] == 2
        ev.append("storage keeps a single index column for all channels")
        return ProbeResult("R3", _TITLES["R3"], "fulfilled", ev)

    def probe_r4(self) -> ProbeResult:
        ev = []
        self._req("POST", "/assets", {"id": "probe-m", "asset_type": "probe-machine",
                                      "attributes": {}})
        self._series("probe-r4", [("temp", "float64"), ("press", "float64")])
        self._req("POST", "/references", {"asset_id": "probe-m", "series_id": "probe-r4",
                                          "subrange": None, "role": "telemetry"})
        self._req("PUT", "/policies", {"policies": [
            {"kind": "historization", "level": "type", "asset_type": "probe-machine",
             "value": True}]})
        r = self._req("POST", "/assets/probe-m/updates",
                      {"attribute": "temp", "value": 42.5, "timestamp": NS_PER_MIN}).json()
        assert r["historized"] is True
        _, rows, _ = self._fetch("/series/probe-r4/data", {})
        assert any(row["i"] == NS_PER_MIN and row["v"].get("temp") == 42.5 for row in rows)
        ev.append("type-level policy historized an attribute update")
        self._req("PUT", "/policies", {"policies": [
            {"kind": "historization", "level": "attribute", "series": "probe-r4",
             "channel": "temp", "value": False}]})
        r = self._req("POST", "/assets/probe-m/updates",
                      {"attribute": "temp", "value": 43.0, "timestamp": 2 * NS_PER_MIN}).json()
        assert r["historized"] is False
        r = self._req("POST", "/assets/probe-m/updates",
                      {"attribute": "press", "value": 1.5, "timestamp": 2 * NS_PER_MIN}).json()
        assert r["historized"] is True
        ev.append("attribute-level override beats the type-level setting")
        latest = self._req("GET", "/assets/probe-m").json()["latest"]
        assert latest["temp"]["value"] == 43.0
        ev.append("latest-value cache updated even when not historized")
        return ProbeResult("R4", _TITLES["R4"], "fulfilled", ev)

    def probe_r5(self) -> ProbeResult:
        ev = []
        self._series("probe-r5", [("val", "float64")])
        days = 9
        values = [float(100 + (k % 24)) for k in range(days * 24)]
        self._post_points("probe-r5", [
            {"i": k * NS_PER_HOUR, "v": {"val": values[k]}} for k in range(days * 24)])
        self._req("PUT", "/policies", {"policies": [
            {"kind": "rollup", "level": "attribute", "series": "probe-r5", "channel": "val",
             "value": [{"resolution": "1h", "functions": ["mean"], "retention": "forever"},
                       {"resolution": "1d", "functions": ["mean"], "retention": "forever"}]},
            {"kind": "retention", "level": "attribute", "series": "probe-r5", "channel": "val",
             "value": "7d"}]})
        now = days * 24 * NS_PER_HOUR
        self._req("POST", "/maintenance/run", {"now": now})
        header, buckets, _ = self._fetch("/series/probe-r5/data",
                                         {"agg": "mean", "resolution": "1w", "from": 0,
                                          "to": 7 * NS_PER_DAY})
        assert header["plan"]["level"] == "daily", header["plan"]
        expected = sum(values[: 7 * 24]) / (7 * 24)
        got = buckets[0]["v"]["val"]
        assert abs(got - expected) <= 1e-12 * abs(expected)
        ev.append("weekly mean planned against the daily rollup level")
        header, _, _ = self._fetch("/series/probe-r5/data",
                                   {"agg": "mean", "resolution": "45m",
                                    "from": 8 * NS_PER_DAY, "to": now})
        assert header["plan"]["level"] == "raw", header["plan"]
        ev.append("45-minute request falls back to raw (60 does not divide 45)")
        resp = self.client.get("/series/probe-r5/data",
                               params={"from": 0, "to": NS_PER_DAY})
        assert resp.status_code == 422, resp.status_code
        ev.append("purged raw range answers 422 instead of silent emptiness")
        _, daily, _ = self._fetch("/series/probe-r5/data",
                                  {"agg": "mean", "resolution": "1d", "from": 0,
                                   "to": days * NS_PER_DAY})
        assert len(daily) == days
        ev.append(f"daily aggregates survive raw cleanup for all {days} days")
        return ProbeResult("R5", _TITLES["R5"], "fulfilled", ev)

    def probe_r6(self) -> ProbeResult:
        ev = []
        self._series("probe-r6", [("x", "float64")])
        self._post_points("probe-r6", [{"i": k * NS_PER_S, "v": {"x": 1.0}} for k in range(10)])
        self._req("POST", "/series/probe-r6/metadata",
                  {"static": {"unit": "Cel", "semantic": "historical"}})
        self._req("POST", "/series/probe-r6/metadata",
                  {"segment": {"range": {"start": 2 * NS_PER_S, "end": 5 * NS_PER_S},
                               "entries": {"quality": "suspect"}}})
        merged = self._req("GET", "/series/probe-r6/metadata",
                           ).json()
        inside = self._req("GET", f"/series/probe-r6/metadata?at={3 * NS_PER_S}").json()
        outside = self._req("GET", f"/series/probe-r6/metadata?at={8 * NS_PER_S}").json()
        assert inside["metadata"] == {"unit": "Cel", "semantic": "historical",
                                      "quality": "suspect"}
        assert outside["metadata"] == {"unit": "Cel", "semantic": "historical"}
        assert len(merged["segments"]) == 1
        ev.append("static and segmented metadata merge with segment precedence")
        before = self._req("GET", "/series/probe-r6/stats").json()["metadata_bytes"]
        self._post_points("probe-r6", [{"i": (100 + k) * NS_PER_S, "v": {"x": 2.0}}
                                       for k in range(100)])
        after = self._req("GET", "/series/probe-r6/stats").json()["metadata_bytes"]
        assert before == after
        ev.append("metadata volume unchanged after appending 10x more points")
        return ProbeResult("R6", _TITLES["R6"], "fulfilled", ev)

    def probe_r7(self) -> ProbeResult:
        ev = []
        horizon = 10**18  # far in the future
        self._req("POST", "/series", {
            "id": "probe-r7", "channels": [{"name": "plan", "value_type": "float64",
                                            "unit": "", "description": ""}],
            "index_kind": "time", "series_kind": "forecast",
            "static_metadata": {"semantic": "forecast"}})
        self._post_points("probe-r7", [{"i": horizon + k * NS_PER_HOUR, "v": {"plan": float(k)}}
                                       for k in range(4)])
        header, rows, _ = self._fetch("/series/probe-r7/data", {})
        assert header["series_kind"] == "forecast" and len(rows) == 4
        ev.append("forecast series with future timestamps stored and typed")
        return ProbeResult("R7", _TITLES["R7"], "fulfilled", ev)

    def probe_r8(self) -> ProbeResult:
        ev = []
        self._series("probe-r8", [("x", "float64")])
        self._post_points("probe-r8", [{"i": k * NS_PER_S, "v": {"x": float(k)}}
                                       for k in range(100)])
        stats_before = self._req("GET", "/stats").json()
        t1, t2 = 20 * NS_PER_S, 60 * NS_PER_S
        t1b = 30 * NS_PER_S
        for asset_id, atype, rng in [("probe-heat", "heat", None),
                                     ("probe-billet", "billet", {"start": t1, "end": t2}),
                                     ("probe-bar", "bar", {"start": t1, "end": t1b})]:
            self._req("POST", "/assets", {"id": asset_id, "asset_type": atype, "attributes": {}})
            self._req("POST", "/references", {"asset_id": asset_id, "series_id": "probe-r8",
                                              "subrange": rng, "role": "slice"})
        stats_after = self._req("GET", "/stats").json()
        assert stats_before == stats_after
        ev.append("attaching nested references copied no data")
        via_asset = self._fetch("/assets/probe-billet/data", {"role": "slice"})[1]
        direct = self._fetch("/series/probe-r8/data", {"from": t1, "to": t2})[1]
        assert via_asset == direct
        ev.append("billet-scoped query equals the range-clamped series query")
        clamped = self._fetch("/assets/probe-bar/data",
                              {"role": "slice", "from": 0, "to": t2})[1]
        direct_bar = self._fetch("/series/probe-r8/data", {"from": t1, "to": t1b})[1]
        assert clamped == direct_bar
        ev.append("requested ranges clamp to the reference subrange")
        return ProbeResult("R8", _TITLES["R8"], "fulfilled", ev)

    def probe_r9(self) -> ProbeResult:
        ev = []
        self._series("probe-r9", [("v_c", "float64"), ("temp", "float64")])
        minutes = 30
        self._post_points("probe-r9", [
            {"i": k * NS_PER_MIN, "v": {"v_c": 1.0, "temp": 900.0 - k}}
            for k in range(minutes)])
        view = {
            "source_series": "probe-r9",
            "speed_channel": "v_c",
            "offsets": [{"channel": "temp", "offset_mm": 5000}],
            "step_mm": 2000,
            "cuts": [{"product_id": "probe-p1", "start_mm": 0, "end_mm": 10000}],
            "index_mode": "position",
        }
        resp = self.client.put("/views", json={"views": [
            {**view, "id": "probe-view-od", "materialization": "on_demand"},
            {**view, "id": "probe-view-mat", "materialization": "materialized"}]})
        if resp.status_code == 404:
            return ProbeResult("R9", _TITLES["R9"], "missing",
                               ["view endpoints are disabled on this deployment"])
        if resp.status_code != 200:
            raise errors.CastlineError(f"PUT /views -> {resp.status_code}: {resp.text[:200]}")
        h1, od_rows, _ = self._fetch("/views/probe-view-od/products/probe-p1")
        h2, mat_rows, _ = self._fetch("/views/probe-view-mat/products/probe-p1")
        assert od_rows == mat_rows and len(od_rows) == 5
        ev.append("materialized and on-demand product tables are identical")
        assert h1["index_mode"] == "position"
        first = od_rows[0]
        assert first["v"]["temp"] == 895.0 and first["t"]["temp"] == 5 * NS_PER_MIN
        ev.append("position re-indexing maps sensor offsets onto product coordinates")
        return ProbeResult("R9", _TITLES["R9"], "fulfilled", ev)

    def probe_r10(self) -> ProbeResult:
        ev = []
        self._series("probe-r10", [("y", "float64")])
        n = 120
        t_mid = 60 * NS_PER_MIN
        all_points = [(k * NS_PER_MIN, float(k) + 0.5) for k in range(n)]
        csv_path = Path(tempfile.gettempdir()) / "castline-probe-r10.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("index,y\n")
            for ts, val in all_points:
                if ts < t_mid:
                    fh.write(f"{ts},{val!r}\n")
        self._post_points("probe-r10", [{"i": ts, "v": {"y": val}}
                                        for ts, val in all_points if ts >= t_mid])
        native_points = self._req("GET", "/series/probe-r10/stats").json()["points"]
        self._req("PUT", "/bindings", {"bindings": [{
            "series_id": "probe-r10",
            "segments": [
                {"range": {"start": None, "end": t_mid}, "kind": "csv-file",
                 "config": {"path": str(csv_path)}},
                {"range": {"start": t_mid, "end": None}, "kind": "native", "config": {}}]}]})
        assert self._req("GET", "/series/probe-r10/stats").json()["points"] == native_points
        ev.append("binding the legacy CSV copied nothing into the native store")
        _, rows, _ = self._fetch("/series/probe-r10/data", {})
        assert [(r["i"], r["v"]["y"]) for r in rows] == all_points
        ev.append("federated query stitches CSV and native segments seamlessly")
        _, buckets, _ = self._fetch("/series/probe-r10/data",
                                    {"agg": "mean", "resolution": "45m"})
        by_bucket: dict[int, list[float]] = {}
        for ts, val in all_points:
            by_bucket.setdefault(ts // (45 * NS_PER_MIN) * (45 * NS_PER_MIN), []).append(val)
        for b in buckets:
            exp = sum(by_bucket[b["i"]]) / len(by_bucket[b["i"]])
            assert abs(b["v"]["y"] - exp) <= 1e-12 * max(1.0, abs(exp))
        ev.append("aggregate over a bucket straddling the segment boundary is exact")
        return ProbeResult("R10", _TITLES["R10"], "fulfilled", ev)

    # -- driver ------------------------------------------------------------------

    def run(self) -> ConformanceReport:
        try:
            self._req("GET", "/healthz")
        except (errors.CastlineError, httpx.TransportError) as exc:
            return ConformanceReport(
                results=[ProbeResult(req, _TITLES[req], "missing", []) for req in _TITLES],
                note=f"service unreachable: {exc}")
        results = []
        probes = [self.probe_r1, self.probe_r2, self.probe_r3, self.probe_r4,
                  self.probe_r5, self.probe_r6, self.probe_r7, self.probe_r8,
                  self.probe_r9, self.probe_r10]
        for req, probe in zip(_TITLES, probes):
            try:
                results.append(probe())
            except AssertionError as exc:
                results.append(ProbeResult(req, _TITLES[req], "partial",
                                           [f"probe assertion failed: {exc}"]))
            except (errors.CastlineError, httpx.HTTPError) as exc:
                results.append(ProbeResult(req, _TITLES[req], "missing",
                                           [f"probe failed: {exc}"]))
        return ConformanceReport(results)


def conformance(url: str = DEFAULT_URL, client: Optional[httpx.Client] = None) -> ConformanceReport:
    return ConformanceProbe(url, client).run()


def export_csv(series_id: str, start: Optional[int], end: Optional[int], out_path: str | Path,
               url: str = DEFAULT_URL, client: Optional[httpx.Client] = None) -> int:
    """Dump a series range into the CSV format the csv-file connector reads."""
    own = client is None
    client = client or httpx.Client(base_url=url, timeout=60.0)
    try:
        params: dict = {}
        if start is not None:
            params["from"] = start
        if end is not None:
            params["to"] = end
        with client.stream("GET", f"/series/{series_id}/data", params=params) as resp:
            if resp.status_code != 200:
                resp.read()
                raise errors.CastlineError(
                    f"GET /series/{series_id}/data -> {resp.status_code}: {resp.text[:200]}")
            header, rows, footer = decode_stream(resp.iter_lines())
    except httpx.TransportError as exc:
        raise errors.ServiceUnreachable(f"cannot reach {url}: {exc}") from None
    finally:
        if own:
            client.close()
    channels = header["channels"]
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + channels)
        for row in rows:
            cells: list = [str(row["i"])]
            for ch in channels:
                v = row["v"].get(ch)
                if v is None:
                    cells.append("")
                elif isinstance(v, bool):
                    cells.append("true" if v else "false")
                elif isinstance(v, float):
                    cells.append(repr(v))
                else:
                    cells.append(str(v))
            writer.writerow(cells)
    return len(rows)
