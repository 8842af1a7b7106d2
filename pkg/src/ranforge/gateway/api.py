"""HTTP surface: plans, runs, inventory, results, verdicts and the test agents.

Errors are returned as ``{"code", "message", "detail"}`` with the status of
the error class (see :mod:`ranforge.errors`).
"""

from __future__ import annotations

import json
from typing import Optional

import yaml
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from starlette.concurrency import run_in_threadpool

from ..errors import InvalidInput, RanforgeError, SpecSyntaxError
from ..testbed import Testbed
from . import views
from .schemas import all_schemas


def _error(exc: RanforgeError) -> JSONResponse:
    return JSONResponse(status_code=exc.http_status, content=exc.to_dict())


async def _json_body(request: Request, default: Optional[dict] = None) -> dict:
    raw = await request.body()
    if not raw.strip():
        if default is not None:
            return default
        raise InvalidInput("request body required")
    try:
        body = json.loads(raw)
    except ValueError as exc:
        raise InvalidInput(f"body is not JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise InvalidInput("body must be a JSON object")
    return body


def create_app(tb: Testbed) -> FastAPI:
    app = FastAPI(title="ranforge", version="1")
    app.state.testbed = tb

    @app.exception_handler(RanforgeError)
    async def ranforge_error(_request: Request, exc: RanforgeError):
        return _error(exc)

    @app.exception_handler(RequestValidationError)
    async def validation_error(_request: Request, exc: RequestValidationError):
        return _error(InvalidInput("request validation failed", detail=json.loads(json.dumps(exc.errors(), default=str))))

    @app.exception_handler(KeyError)
    async def missing_field(_request: Request, exc: KeyError):
        return _error(InvalidInput(f"missing field {exc.args[0]}", detail={"field": exc.args[0]}))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/schemas")
    def schemas():
        return all_schemas()

    # -- plans and runs

    @app.post("/specs", status_code=201)
    async def post_spec(request: Request):
        raw = await request.body()
        ctype = request.headers.get("content-type", "")
        patches = None
        doc: object = raw.decode()
        if "json" in ctype:
            try:
                body = json.loads(raw)
            except ValueError as exc:
                raise SpecSyntaxError(f"body is not JSON: {exc}") from exc
            if isinstance(body, dict) and "spec" in body:
                doc, patches = body["spec"], body.get("patches")
            else:
                doc = body
        elif not raw.strip():
            raise SpecSyntaxError("empty spec document")
        else:
            try:
                yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise SpecSyntaxError(f"spec is not YAML: {exc}") from exc
        return await run_in_threadpool(views.submit_spec, tb, doc, patches)

    @app.get("/plans")
    def plans():
        return views.list_plans(tb)

    @app.get("/plans/{plan_id}")
    def plan(plan_id: str):
        return views.get_plan(tb, plan_id)

    @app.post("/pipelines/{plan_id}/trigger", status_code=202)
    async def trigger(plan_id: str, request: Request):
        body = await _json_body(request, default={})
        wait = bool(body.get("wait", False))
        return await run_in_threadpool(views.trigger, tb, plan_id, body.get("schedule"), body.get("tasks"), wait)

    @app.post("/pipelines/{plan_id}/runs", status_code=201)
    async def create_run(plan_id: str, request: Request):
        body = await _json_body(request, default={})
        return await run_in_threadpool(views.create_run, tb, plan_id, body.get("schedule"), body.get("tasks"))

    @app.get("/runs")
    def runs(plan: Optional[str] = None):
        return views.list_runs(tb, plan)

    @app.get("/runs/{run_id}")
    def run(run_id: str):
        return views.get_run(tb, run_id)

    @app.post("/runs/{run_id}/tasks/{task}")
    async def exec_task(run_id: str, task: str, request: Request):
        body = await _json_body(request, default={})
        return await run_in_threadpool(views.execute_task, tb, run_id, task, body.get("inputs"))

    # -- inventory and registry

    @app.get("/radios")
    def radios(band: Optional[str] = None):
        return views.list_radios(tb, band)

    @app.get("/placements")
    def placements(active: bool = False):
        return views.list_placements(tb, active)

    @app.post("/placements", status_code=201)
    async def claim(request: Request):
        return await run_in_threadpool(views.claim, tb, await _json_body(request, default={}))

    @app.post("/placements/{placement_id}/release")
    def release(placement_id: str):
        return views.release(tb, placement_id)

    @app.get("/capacity")
    def capacity():
        return views.capacity(tb)

    @app.get("/images")
    def images(name: Optional[str] = None):
        return views.list_images(tb, name)

    # -- results

    @app.get("/configs")
    def configs():
        return views.configs(tb)

    @app.get("/results")
    def results(config: Optional[str] = None, date_from: Optional[str] = None, date_to: Optional[str] = None,
                limit: Optional[int] = None, include_aborted: bool = False):
        return views.list_results(tb, config, date_from, date_to, limit, include_aborted)

    @app.get("/results/{run_id}/series.csv")
    def result_series(run_id: str):
        return PlainTextResponse(views.series_csv(tb, run_id), media_type="text/csv")

    @app.get("/results/{run_id}")
    def result(run_id: str):
        return views.get_result(tb, run_id)

    @app.get("/aggregates")
    def aggregates(config: str, date: str):
        return views.aggregates(tb, config, date)

    @app.get("/baselines/{config_key:path}")
    def baseline(config_key: str, k: float = 2.0, min_history: int = 5, include_quarantined: bool = False):
        return views.baseline(tb, config_key, k, min_history, include_quarantined)

    @app.get("/verdicts/{run_id}")
    def verdict(run_id: str):
        return views.get_verdict(tb, run_id)

    # -- gNB / UE agents

    @app.post("/gnb/start")
    async def gnb_start(request: Request):
        return await run_in_threadpool(views.gnb_start, tb, await _json_body(request))

    @app.post("/ue/attach")
    async def ue_attach(request: Request):
        return await run_in_threadpool(views.ue_attach, tb, await _json_body(request))

    @app.post("/ue/traffic")
    async def ue_traffic(request: Request):
        return await run_in_threadpool(views.ue_traffic, tb, await _json_body(request))

    @app.post("/teardown")
    async def teardown(request: Request):
        return await run_in_threadpool(views.teardown, tb, await _json_body(request))

    return app
