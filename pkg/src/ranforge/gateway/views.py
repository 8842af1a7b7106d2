"""Query functions shared by the HTTP service and the CLI.

Each function returns the exact JSON body of its endpoint, so ``--json`` CLI
output and HTTP responses come from one place.
"""

from __future__ import annotations

from typing import Any, Iterable, Mapping, Optional

from ..airtest import LinkModel, Phase
from ..engine import PipelineRun, Trigger
from ..errors import BaselineNotFound, InvalidInput, VerdictNotFound
from ..intake import TestPlan
from ..inventory import LatencyClass, ResourceClaim, radio_to_dict
from ..testbed import Testbed
from ..verdict import DEFAULT_K, DEFAULT_MIN_HISTORY, build_baseline, select_history


def plan_view(plan: TestPlan) -> dict:
    d = plan.to_dict()
    d["workload_count"] = plan.workload_count
    return d


def run_view(run: PipelineRun) -> dict:
    return run.to_dict()


# -- plans and runs


def submit_spec(tb: Testbed, doc: Any, patch_bodies: Optional[Mapping[str, str]] = None,
                base_dir: Optional[str] = None) -> dict:
    return plan_view(tb.submit_spec(doc, base_dir=base_dir, patch_bodies=patch_bodies))


def list_plans(tb: Testbed) -> list[dict]:
    return [plan_view(p) for p in tb.plans()]


def get_plan(tb: Testbed, plan_id: str) -> dict:
    return plan_view(tb.plan(plan_id))


def trigger(tb: Testbed, plan_id: str, schedule: Optional[str] = None, tasks: Optional[Iterable[str]] = None,
            wait: bool = False) -> dict:
    tb.plan(plan_id)  # PlanNotFound before anything else
    return run_view(tb.trigger(plan_id, Trigger.MANUAL, schedule, list(tasks) if tasks else None, wait=wait))


def create_run(tb: Testbed, plan_id: str, schedule: Optional[str] = None,
               tasks: Optional[Iterable[str]] = None) -> dict:
    plan = tb.plan(plan_id)
    if schedule is not None and tasks is None:
        tasks = plan.schedule(schedule).tasks
    return run_view(tb.engine.create_run(plan_id, Trigger.MANUAL, list(tasks) if tasks else None, schedule))


def list_runs(tb: Testbed, plan_id: Optional[str] = None) -> list[dict]:
    return [run_view(r) for r in tb.engine.runs(plan_id)]


def get_run(tb: Testbed, run_id: str) -> dict:
    return run_view(tb.engine.get_run(run_id))


def execute_task(tb: Testbed, run_id: str, task: str, inputs: Optional[dict] = None) -> dict:
    return tb.engine.execute_task(run_id, task, inputs).to_dict()


# -- inventory


def list_radios(tb: Testbed, band: Optional[str] = None) -> list[dict]:
    if band:
        return [radio_to_dict(r) for r in tb.inventory.discover_radios(band)]
    return [radio_to_dict(r) for r in tb.inventory.radios()]


def list_placements(tb: Testbed, active_only: bool = False) -> list[dict]:
    return [p.to_dict() for p in tb.inventory.placements(active_only)]


def claim(tb: Testbed, body: Mapping) -> dict:
    try:
        c = ResourceClaim(
            isolated_cores_needed=int(body.get("isolated_cores_needed", 4)),
            hugepage_bytes_needed=int(body.get("hugepage_bytes_needed", 2 * 1024**3)),
            latency_class=LatencyClass(body.get("latency_class", "LOW_LATENCY")),
            radios_needed=int(body.get("radios_needed", 1)),
            band_id=body.get("band_id"),
            prbs_needed=int(body.get("prbs_needed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"bad resource claim: {exc}") from exc
    return tb.inventory.match(c).to_dict()


def release(tb: Testbed, placement_id: str) -> dict:
    return tb.inventory.release(placement_id).to_dict()


def capacity(tb: Testbed) -> dict:
    return tb.inventory.capacity()


def list_images(tb: Testbed, image_name: Optional[str] = None) -> list[dict]:
    return tb.registry.ls(image_name)


# -- results


def list_results(
    tb: Testbed,
    config: Optional[str] = None,
    date_from: Optional[str] = None,
    date_to: Optional[str] = None,
    limit: Optional[int] = None,
    include_aborted: bool = False,
) -> list[dict]:
    rng = (date_from, date_to) if date_from or date_to else None
    return [r.to_dict() for r in tb.vault.query(config, rng, limit, include_aborted)]


def get_result(tb: Testbed, run_id: str) -> dict:
    return tb.vault.get(run_id).to_dict()


def series_csv(tb: Testbed, run_id: str) -> str:
    return tb.vault.series_csv(run_id)


def aggregates(tb: Testbed, config: str, date: str) -> list[dict]:
    return [a.to_dict() for a in tb.vault.daily_aggregate(config, date)]


def baseline(tb: Testbed, config_key: str, k: float = DEFAULT_K, min_history: int = DEFAULT_MIN_HISTORY,
             include_quarantined: bool = False) -> dict:
    history = select_history(tb.vault, config_key, include_quarantined=include_quarantined)
    if not history:
        raise BaselineNotFound(f"no usable history for {config_key}")
    built_at = max(r.started_at for r in history)
    return build_baseline(config_key, history, k, min_history, built_at).to_dict()


def get_verdict(tb: Testbed, run_id: str) -> dict:
    rec = tb.vault.get(run_id)
    if rec.verdict is None:
        raise VerdictNotFound(f"run {run_id} has no verdict")
    return rec.verdict


def configs(tb: Testbed) -> list[str]:
    return tb.vault.configs()


# -- agent endpoints


def _link(body: Mapping) -> Optional[LinkModel]:
    raw = body.get("link")
    return LinkModel.from_dict(raw) if raw is not None else None


def gnb_start(tb: Testbed, body: Mapping) -> dict:
    return tb.harness.start_gnb(tb.inventory.deployment(body["deployment_id"]))


def ue_attach(tb: Testbed, body: Mapping) -> dict:
    return tb.harness.attach_ue(tb.inventory.deployment(body["deployment_id"]), _link(body)).to_dict()


def ue_traffic(tb: Testbed, body: Mapping) -> dict:
    dep = tb.inventory.deployment(body["deployment_id"])
    phases = [Phase(float(p["target_rate_mbps"]), int(p["duration_s"])) for p in body["phases"]]
    link = _link(body) or LinkModel()
    run = tb.harness.run_traffic(dep, phases, link, run_id=body.get("run_id"),
                                 band_id=body.get("band_id", ""), prb_count=int(body.get("prb_count", 0)))
    if body.get("report", True):
        tb.harness.report_results(run)
    return run.to_dict(with_samples=bool(body.get("with_samples", False)))


def teardown(tb: Testbed, body: Mapping) -> dict:
    return tb.harness.teardown(tb.inventory.deployment(body["deployment_id"]))
