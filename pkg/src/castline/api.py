"""Application-facing HTTP service.

Data responses default to newline-delimited record streams (header record,
data records flushed in bounded batches, footer record with count and
status); ``format=document`` returns a bounded self-contained JSON body
instead. All endpoints are thin wrappers over the platform modules, so a
decoded payload equals the corresponding library call's result.
"""

from __future__ import annotations

import threading
import time
from typing import Optional

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from castline import errors
from castline.config import ServiceConfig, parse_bindings, parse_policies, parse_views
from castline.model import (
    AggregateFunction,
    Asset,
    IndexRange,
    MetadataSegment,
    SeriesReference,
    SeriesSchema,
)
from castline.platform import Platform
from castline.store import Aggregation, DataBatch, DataPoint, MAX_QUERY_LIMIT, QuerySpec
from castline.streams import StreamStats, block_rows, encode_stream
from castline.timeutil import parse_duration_ns, parse_timestamp_ns

_STATUS = {
    errors.UnknownAsset: 404,
    errors.UnknownSeries: 404,
    errors.UnknownView: 404,
    errors.UnknownProduct: 404,
    errors.UnknownAttribute: 404,
    errors.UnknownKind: 404,
    errors.TypeMismatch: 409,
    errors.DuplicateId: 409,
    errors.DuplicateKind: 409,
    errors.Unanswerable: 422,
    errors.OutOfCoverage: 422,
    errors.SegmentUnavailable: 503,
}


def _status_for(exc: errors.CastlineError) -> int:
    for cls, code in _STATUS.items():
        if isinstance(exc, cls):
            return code
    return 400


def _bad(message: str) -> errors.CastlineError:
    return errors.InvalidRange(message)


def _parse_index(raw: Optional[str], name: str) -> Optional[int]:
    if raw is None:
        return None
    try:
        return parse_timestamp_ns(raw)
    except ValueError as exc:
        raise _bad(f"query parameter {name!r}: {exc}") from None


def _parse_spec(request: Request) -> QuerySpec:
    q = request.query_params
    start = _parse_index(q.get("from"), "from")
    end = _parse_index(q.get("to"), "to")
    rng = IndexRange(start, end)
    channels = None
    if q.get("channels"):
        channels = [c.strip() for c in q["channels"].split(",") if c.strip()]
    limit = None
    if q.get("limit"):
        try:
            limit = int(q["limit"])
        except ValueError:
            raise _bad(f"limit must be an integer, got {q['limit']!r}") from None
    aggregation = None
    if q.get("agg"):
        if not q.get("resolution"):
            raise _bad("aggregation requests require a 'resolution' parameter")
        try:
            resolution = parse_duration_ns(q["resolution"])
        except ValueError as exc:
            raise _bad(str(exc)) from None
        try:
            function = AggregateFunction(q["agg"])
        except ValueError:
            raise _bad(f"unknown aggregate function {q['agg']!r}") from None
        aggregation = Aggregation(function, resolution)
    return QuerySpec(range=rng, channels=channels, limit=limit,
                     cursor=q.get("cursor"), aggregation=aggregation)


def create_app(platform: Platform, config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="castline", docs_url=None, redoc_url=None)
    app.state.platform = platform
    app.state.config = config

    @app.exception_handler(errors.CastlineError)
    async def handle_castline_error(request: Request, exc: errors.CastlineError):
        return JSONResponse(status_code=_status_for(exc),
                            content={"error": {"type": type(exc).__name__, "message": str(exc)}})

    def _views_enabled():
        if not config.views_enabled:
            raise errors.UnknownView("views feature is disabled on this deployment")

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise _bad("request body is not valid JSON") from None
        if not isinstance(body, dict):
            raise _bad("request body must be a JSON object")
        return body

    def _stream_response(header: dict, rows, record_type: str, cursor: Optional[str]):
        stats = StreamStats()
        gen = encode_stream(header, rows, record_type=record_type, cursor=cursor,
                            batch_size=config.stream_batch_size, stats=stats)
        return StreamingResponse(gen, media_type="application/x-ndjson")

    def _data_response(request: Request, series_id: str, spec: QuerySpec, plan, result):
        record_type = "bucket" if result.kind == "buckets" else "point"
        schema = platform.registry.get_schema(series_id)
        header = {
            "series": series_id,
            "index_kind": schema.index_kind.value,
            "series_kind": schema.series_kind.value,
            "kind": result.kind,
            "channels": result.block.channel_names(),
            "plan": plan,
            "query": {
                "from": spec.range.start, "to": spec.range.end,
                "limit": spec.limit,
                "agg": spec.aggregation.function.value if spec.aggregation else None,
                "resolution_ns": spec.aggregation.resolution_ns if spec.aggregation else None,
            },
        }
        if request.query_params.get("format", "stream") == "document":
            if len(result.block) > MAX_QUERY_LIMIT:
                raise _bad(f"document responses are bounded to {MAX_QUERY_LIMIT} records; "
                           f"use streaming or paging")
            return {**header, "count": len(result.block),
                    "next_cursor": result.next_cursor,
                    "points": list(block_rows(result.block))}
        return _stream_response(header, block_rows(result.block), record_type, result.next_cursor)

    # -- health and introspection ------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "views_enabled": config.views_enabled}

    @app.get("/stats")
    def stats():
        return platform.store.store_stats()

    @app.get("/series/{series_id}/stats")
    def series_stats(series_id: str):
        return platform.store.series_stats(series_id)

    # -- assets ---------------------------------------------------------------------

    @app.get("/assets")
    def list_assets():
        return {"assets": [a.as_dict() for a in platform.registry.list_assets()]}

    @app.post("/assets")
    async def register_asset(request: Request):
        body = await _json_body(request)
        try:
            asset = Asset.from_dict(body)
        except (KeyError, TypeError) as exc:
            raise _bad(f"malformed asset payload: {exc}") from None
        platform.registry.register_asset(asset)
        return {"id": asset.id}

    @app.get("/assets/{asset_id}")
    def get_asset(asset_id: str):
        asset = platform.registry.get_asset(asset_id)
        return {**asset.as_dict(), "latest": platform.store.latest_values(asset_id)}

    @app.get("/assets/{asset_id}/series")
    def asset_series(asset_id: str):
        out = []
        for ref in platform.registry.references_of_asset(asset_id):
            schema = platform.registry.get_schema(ref.series_id)
            out.append({
                "series_id": ref.series_id,
                "role": ref.role,
                "range": ref.effective_range().as_dict(),
                "index_kind": schema.index_kind.value,
                "series_kind": schema.series_kind.value,
                "metadata": {
                    "static": dict(schema.static_metadata),
                    "segments": len(platform.registry.metadata_segments(ref.series_id)),
                },
            })
        return {"asset": asset_id, "series": out}

    @app.get("/assets/{asset_id}/data")
    def asset_data(request: Request, asset_id: str):
        spec = _parse_spec(request)
        role = request.query_params.get("role")
        series_id, plan, result = platform.query_via_asset(asset_id, spec, role)
        return _data_response(request, series_id, spec, plan, result)

    @app.post("/assets/{asset_id}/updates")
    async def ingest_update(request: Request, asset_id: str):
        body = await _json_body(request)
        if "attribute" not in body or "value" not in body or "timestamp" not in body:
            raise _bad("update payload needs attribute, value and timestamp")
        try:
            ts = parse_timestamp_ns(body["timestamp"])
        except (ValueError, TypeError) as exc:
            raise _bad(f"timestamp: {exc}") from None
        historized = platform.store.ingest_update(asset_id, body["attribute"], body["value"], ts)
        return {"historized": historized}

    # -- series -----------------------------------------------------------------------

    @app.get("/series")
    def list_series():
        return {"series": [s.as_dict() for s in platform.registry.list_series()]}

    @app.post("/series")
    async def define_series(request: Request):
        body = await _json_body(request)
        try:
            schema = SeriesSchema.from_dict(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise _bad(f"malformed series payload: {exc}") from None
        platform.registry.define_series(schema)
        return {"id": schema.id}

    @app.get("/series/{series_id}")
    def get_series(series_id: str):
        return platform.registry.get_schema(series_id).as_dict()

    @app.post("/references")
    async def attach_reference(request: Request):
        body = await _json_body(request)
        try:
            ref = SeriesReference.from_dict(body)
        except (KeyError, TypeError) as exc:
            raise _bad(f"malformed reference payload: {exc}") from None
        platform.registry.attach_reference(ref)
        return {"attached": True}

    @app.get("/series/{series_id}/data")
    def series_data(request: Request, series_id: str):
        spec = _parse_spec(request)
        plan, result = platform.query(series_id, spec)
        return _data_response(request, series_id, spec, plan, result)

    @app.post("/series/{series_id}/data")
    async def append_data(request: Request, series_id: str):
        body = await _json_body(request)
        points_raw = body.get("points")
        if not isinstance(points_raw, list):
            raise _bad("payload must carry a 'points' list")
        points = []
        for i, p in enumerate(points_raw):
            if not isinstance(p, dict) or "i" not in p or not isinstance(p.get("v"), dict):
                raise _bad(f"points[{i}] must be an object with 'i' and 'v'")
            try:
                index = parse_timestamp_ns(p["i"])
            except (ValueError, TypeError) as exc:
                raise _bad(f"points[{i}].i: {exc}") from None
            points.append(DataPoint(index, p["v"]))
        accepted = platform.append(DataBatch(series_id, points))
        return {"accepted": accepted}

    @app.get("/series/{series_id}/metadata")
    def get_metadata(request: Request, series_id: str):
        at = request.query_params.get("at")
        if at is not None:
            index = _parse_index(at, "at")
            return {"at": index, "metadata": platform.registry.metadata_at(series_id, index)}
        schema = platform.registry.get_schema(series_id)
        return {"static": dict(schema.static_metadata),
                "segments": [s.as_dict() for s in platform.registry.metadata_segments(series_id)]}

    @app.post("/series/{series_id}/metadata")
    async def set_metadata(request: Request, series_id: str):
        body = await _json_body(request)
        if "static" in body:
            if not isinstance(body["static"], dict):
                raise _bad("'static' must be an object")
            platform.registry.set_static_metadata(series_id, body["static"])
        if "segment" in body:
            seg = body["segment"]
            if not isinstance(seg, dict) or "range" not in seg or "entries" not in seg:
                raise _bad("'segment' must carry 'range' and 'entries'")
            platform.registry.add_metadata_segment(series_id, MetadataSegment.from_dict(seg))
        return {"ok": True}

    # -- views ---------------------------------------------------------------------------

    @app.get("/views")
    def list_views():
        _views_enabled()
        return {"views": [vd.as_dict() for vd in platform.views.list_views()]}

    @app.get("/views/{view_id}/products/{product_id}")
    def view_product(request: Request, view_id: str, product_id: str):
        _views_enabled()
        table = platform.views.query_view(view_id, product_id)
        header = {
            "view": view_id,
            "product": product_id,
            "index_mode": table.index_mode.value,
            "step_mm": table.step_mm,
            "start_mm": table.start_mm,
            "end_mm": table.end_mm,
            "channels": sorted(table.columns),
        }
        rows = table.rows()
        if request.query_params.get("format", "stream") == "document":
            return {**header, "count": len(rows), "rows": rows}
        return _stream_response(header, iter(rows), "row", None)

    @app.post("/views/{view_id}/refresh")
    def refresh_view(view_id: str):
        _views_enabled()
        return {"refreshed": platform.views.refresh_materialized(view_id)}

    # -- admin -------------------------------------------------------------------------------

    @app.put("/policies")
    async def put_policies(request: Request):
        body = await _json_body(request)
        decls = parse_policies(body.get("policies", []))
        platform.replace_policies(decls, replace=bool(body.get("replace", False)))
        return {"applied": len(decls)}

    @app.put("/views")
    async def put_views(request: Request):
        _views_enabled()
        body = await _json_body(request)
        definitions = parse_views(body.get("views", []))
        platform.replace_views(definitions, replace=bool(body.get("replace", False)))
        return {"applied": len(definitions)}

    @app.put("/bindings")
    async def put_bindings(request: Request):
        body = await _json_body(request)
        bindings = parse_bindings(body.get("bindings", []))
        platform.replace_bindings(bindings, replace=bool(body.get("replace", False)))
        return {"applied": len(bindings)}

    @app.post("/maintenance/run")
    async def run_maintenance(request: Request):
        now = None
        if await request.body():
            body = await _json_body(request)
            if body.get("now") is not None:
                try:
                    now = parse_timestamp_ns(body["now"])
                except (ValueError, TypeError) as exc:
                    raise _bad(f"now: {exc}") from None
        report = platform.maintenance(now)
        return report

    return app


class ServerHandle:
    """Uvicorn server running in a thread; used by tests and the CLI."""

    def __init__(self, app: FastAPI, host: str, port: int):
        cfg = uvicorn.Config(app, host=host, port=port, log_level="warning")
        self.server = uvicorn.Server(cfg)
        self.thread = threading.Thread(target=self.server.run, daemon=True, name="castline-api")

    def start(self, timeout: float = 10.0) -> "ServerHandle":
        self.thread.start()
        deadline = time.time() + timeout
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("server failed to start in time")
            if not self.thread.is_alive():
                raise RuntimeError("server thread died during startup")
            time.sleep(0.02)
        return self

    @property
    def port(self) -> int:
        servers = list(self.server.servers)
        if servers and servers[0].sockets:
            return servers[0].sockets[0].getsockname()[1]
        return 0

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)
