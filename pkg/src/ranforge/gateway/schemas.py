"""Published JSON Schemas of every response body (served at GET /schemas)."""

from __future__ import annotations

_num = {"type": "number"}
_int = {"type": "integer"}
_str = {"type": "string"}
_bool = {"type": "boolean"}
_ts = {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}T"}
_opt_ts = {"type": ["string", "null"]}
_opt_num = {"type": ["number", "null"]}
_opt_str = {"type": ["string", "null"]}
_state = {"enum": ["PENDING", "RUNNING", "SUCCEEDED", "FAILED", "SKIPPED"]}


def _obj(props: dict, required: list[str] | None = None) -> dict:
    return {"type": "object", "properties": props, "required": list(props) if required is None else required}


def _list(item: dict) -> dict:
    return {"type": "array", "items": item}


ERROR = _obj({"code": _str, "message": _str, "detail": {}})

TASK_RECORD = _obj({
    "task_name": _str,
    "deps": _list(_str),
    "attempt": {"type": "integer", "minimum": 0},
    "state": _state,
    "output": {},
    "logs": _str,
    "error": {"type": ["object", "null"]},
    "started_at": _opt_ts,
    "ended_at": _opt_ts,
})

RUN = _obj({
    "run_id": _str,
    "plan_id": _str,
    "trigger": {"enum": ["CRON", "MANUAL"]},
    "schedule": _opt_str,
    "state": _state,
    "created_at": _ts,
    "started_at": _opt_ts,
    "ended_at": _opt_ts,
    "max_retries": _int,
    "task_records": _list(TASK_RECORD),
})

PLAN = _obj({
    "plan_id": _str,
    "spec_id": _str,
    "spec": {"type": "object"},
    "tasks": _list(_obj({"name": _str, "deps": _list(_str), "params": {"type": "object"}})),
    "resource_claim": {"type": "object"},
    "schedules": _list(_obj({"name": _str, "cadence": _str, "tasks": _list(_str)})),
    "workload_count": _int,
})

RADIO = _obj({
    "radio_id": _str,
    "model": _str,
    "bands": _list(_str),
    "attached_node": _str,
    "link": _str,
    "state": {"enum": ["AVAILABLE", "CLAIMED", "OFFLINE"]},
})

PLACEMENT = _obj({
    "placement_id": _str,
    "node_id": _str,
    "cores": _str,
    "hugepage_pages": _int,
    "hugepage_bytes": _int,
    "radio_ids": _list(_str),
    "band_id": _opt_str,
    "prbs": _int,
    "state": {"enum": ["ACTIVE", "RELEASED"]},
})

IMAGE = _obj({"image_name": _str, "tag_name": _str, "digest": {"type": "string", "pattern": "^sha256:[0-9a-f]{64}$"},
              "size_bytes": _int, "built_at": _ts})

PHASE_SUMMARY = _obj({
    "target_rate_mbps": _num,
    "sample_count": _int,
    "mean": _opt_num,
    "std": _opt_num,
    "min": _opt_num,
    "max": _opt_num,
})

PHASE_DETAIL = _obj({
    "phase_index": _int,
    "target_rate_mbps": _num,
    "sample_count": _int,
    "phase_mean": _opt_num,
    "band_lo": _opt_num,
    "band_hi": _opt_num,
    "in_band_fraction": _opt_num,
    "mean_in_band": {"type": ["boolean", "null"]},
    "phase_ok": {"type": ["boolean", "null"]},
})

VERDICT = _obj({
    "run_id": _str,
    "config_key": _str,
    "outcome": {"enum": ["PASS", "FAIL", "INCONCLUSIVE"]},
    "reason": _str,
    "k": _num,
    "theta": _num,
    "epsilon": _num,
    "baseline_status": {"enum": ["READY", "PROVISIONAL"]},
    "built_from": _list(_str),
    "phases": _list(PHASE_DETAIL),
})

RESULT = _obj({
    "run_id": _str,
    "config_key": _str,
    "date": {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}$"},
    "started_at": _ts,
    "status": {"enum": ["COMPLETED", "ABORTED"]},
    "plan_id": _str,
    "deployment_id": _str,
    "image_name": _str,
    "image_tag": _str,
    "band_id": _str,
    "prb_count": _int,
    "phases": _list(PHASE_SUMMARY),
    "series_ref": _str,
    "abort_reason": _opt_str,
    "verdict": {"anyOf": [VERDICT, {"type": "null"}]},
})

AGGREGATE = _obj({
    "date": _str,
    "config_key": _str,
    "phase_index": _int,
    "target_rate_mbps": _num,
    "run_count": {"type": "integer", "minimum": 1},
    "median": _num,
    "q1": _num,
    "q3": _num,
    "whisker_lo": _num,
    "whisker_hi": _num,
    "outliers": _list(_num),
})

BASELINE = _obj({
    "config_key": _str,
    "status": {"enum": ["READY", "PROVISIONAL"]},
    "k": _num,
    "min_history": _int,
    "run_count": _int,
    "built_from": _list(_str),
    "built_at": _str,
    "phases": _list(_obj({"target_rate_mbps": _num, "history_mean_mbps": _opt_num,
                          "history_std_mbps": _opt_num, "run_count": _int})),
})

GNB = _obj({"deployment_id": _str, "gnb": _str, "node_id": _str, "radio_id": _str, "state": _str})
ATTACH = _obj({"ue_id": _str, "assigned_ip": _str, "route_installed": _bool})
TEST_RUN = _obj({
    "run_id": _str,
    "deployment_id": _str,
    "plan_id": _str,
    "phases": _list(_obj({"target_rate_mbps": _num, "duration_s": _int})),
    "status": {"enum": ["COMPLETED", "ABORTED"]},
    "abort_reason": _opt_str,
    "started_at": _ts,
    "image_name": _str,
    "image_tag": _str,
    "band_id": _str,
    "prb_count": _int,
    "sample_period_s": _num,
    "sample_count": _int,
}, required=["run_id", "deployment_id", "status", "phases", "sample_count"])
TEARDOWN = _obj({"deployment_id": _str, "placement_id": _str, "ue_detached": _bool, "routes_removed": _bool,
                 "gnb_stopped": _bool, "placement_released": _bool})

# (method, path) -> schema of a successful response body
ENDPOINTS: dict[tuple[str, str], dict] = {
    ("POST", "/specs"): PLAN,
    ("GET", "/plans"): _list(PLAN),
    ("GET", "/plans/{plan_id}"): PLAN,
    ("POST", "/pipelines/{plan_id}/trigger"): RUN,
    ("POST", "/pipelines/{plan_id}/runs"): RUN,
    ("GET", "/runs"): _list(RUN),
    ("GET", "/runs/{run_id}"): RUN,
    ("POST", "/runs/{run_id}/tasks/{task}"): TASK_RECORD,
    ("GET", "/radios"): _list(RADIO),
    ("GET", "/placements"): _list(PLACEMENT),
    ("POST", "/placements"): PLACEMENT,
    ("POST", "/placements/{placement_id}/release"): PLACEMENT,
    ("GET", "/images"): _list(IMAGE),
    ("GET", "/results"): _list(RESULT),
    ("GET", "/results/{run_id}"): RESULT,
    ("GET", "/aggregates"): _list(AGGREGATE),
    ("GET", "/configs"): _list(_str),
    ("GET", "/baselines/{config_key}"): BASELINE,
    ("GET", "/verdicts/{run_id}"): VERDICT,
    ("POST", "/gnb/start"): GNB,
    ("POST", "/ue/attach"): ATTACH,
    ("POST", "/ue/traffic"): TEST_RUN,
    ("POST", "/teardown"): TEARDOWN,
}


def all_schemas() -> dict:
    return {
        "error": ERROR,
        "endpoints": {f"{m} {p}": s for (m, p), s in ENDPOINTS.items()},
    }
