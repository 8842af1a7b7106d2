"""Wires the modules into one testbed rooted at a data directory.

Data directory layout::

    <data>/plans/<plan_id>/spec.yaml     submitted spec text
    <data>/plans/<plan_id>/meta.json     resolved repo url, submission time
    <data>/plans/<plan_id>/patches/...   copies of the submitted patch files
    <data>/registry/                     image registry
    <data>/inventory/state.json          placements and deployments
    <data>/vault/                        KPI vault (run event logs under vault/events)
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

from .airtest import AirtestHarness, LinkModel, Phase, ServerStuck
from .clock import SystemClock, isoformat
from .engine import EventStore, PipelineEngine, PipelineRun, Scheduler, TaskContext, TaskResult, Trigger
from .errors import ArtifactMissing, PlanNotFound, RanforgeError, ValidationError
from .forge import BuilderProfile, ImageArtifact, PatchSet, Registry, build_image, load_patchset
from .intake import TestPlan, compile_plan, parse_spec, serialize_spec
from .inventory import Inventory
from .verdict import DEFAULT_EPSILON, DEFAULT_K, DEFAULT_MIN_HISTORY, DEFAULT_THETA, judge_run
from .vault import Vault
from .watch import BuildVerdict, RepoRef, ReleaseTag, decide_build, latest_tag, open_repo

DEFAULT_NOISE_STD_MBPS = 0.25

LinkFactory = Callable[[TestPlan, str], LinkModel]


def seeded_link(plan: TestPlan, test_run_id: str, noise_std_mbps: float = DEFAULT_NOISE_STD_MBPS) -> LinkModel:
    """Default link: nominal capacity, mild noise, seed derived from the test run id."""
    seed = int(hashlib.sha256(test_run_id.encode()).hexdigest()[:8], 16)
    return LinkModel(noise_std_mbps=noise_std_mbps, seed=seed)


@dataclass
class JudgeSettings:
    k: float = DEFAULT_K
    theta: float = DEFAULT_THETA
    epsilon: float = DEFAULT_EPSILON
    min_history: int = DEFAULT_MIN_HISTORY
    include_quarantined: bool = False

    def as_kwargs(self) -> dict:
        return dict(k=self.k, theta=self.theta, epsilon=self.epsilon, min_history=self.min_history,
                    include_quarantined=self.include_quarantined)


@dataclass
class StoredPlan:
    plan: TestPlan
    repo_url: str
    patch_dir: Path
    submitted_at: str
    patches: PatchSet = field(default_factory=PatchSet)


def _resolve_repo(url: str, base_dir: Optional[Path]) -> str:
    if "://" in url or url.startswith("git@") or base_dir is None:
        return url
    p = Path(url)
    return str(p if p.is_absolute() else (base_dir / p).resolve())


class Testbed:
    __test__ = False

    def __init__(
        self,
        data_dir: str | os.PathLike,
        inventory_path: Optional[str | os.PathLike] = None,
        clock=None,
        link_factory: Optional[LinkFactory] = None,
        profile: Optional[BuilderProfile] = None,
        judge: Optional[JudgeSettings] = None,
        max_retries: int = 2,
        backoff_s: float = 5.0,
    ):
        self.data_dir = Path(data_dir)
        self.clock = clock or SystemClock()
        self.registry = Registry(self.data_dir / "registry")
        state = self.data_dir / "inventory" / "state.json"
        if inventory_path:
            self.inventory = Inventory.from_file(inventory_path, state_path=state, clock=self.clock)
        else:
            self.inventory = Inventory.default(state_path=state, clock=self.clock)
        self.vault = Vault(self.data_dir / "vault")
        self.harness = AirtestHarness(self.inventory, self.vault, self.clock)
        self.link_factory: LinkFactory = link_factory or seeded_link
        self.links: dict[str, LinkModel] = {}
        self.profile = profile or BuilderProfile()
        self.judge = judge or JudgeSettings()
        self._plans: dict[str, StoredPlan] = {}
        self.engine = PipelineEngine(
            {
                "trigger": self._task_trigger,
                "tag-fetch": self._task_tag_fetch,
                "registry-diff": self._task_registry_diff,
                "build": self._task_build,
                "deploy": self._task_deploy,
                "continuous-test": self._task_continuous_test,
            },
            EventStore(self.vault.events_dir),
            clock=self.clock,
            max_retries=max_retries,
            backoff_s=backoff_s,
            on_run_end=self._cleanup,
        )
        self._load_plans()

    # -- plans

    @property
    def plans_dir(self) -> Path:
        return self.data_dir / "plans"

    def _load_plans(self) -> None:
        if not self.plans_dir.is_dir():
            return
        for d in sorted(self.plans_dir.iterdir()):
            spec_file, meta_file = d / "spec.yaml", d / "meta.json"
            if not spec_file.exists() or not meta_file.exists():
                continue
            meta = json.loads(meta_file.read_text())
            plan = compile_plan(parse_spec(spec_file.read_text()), self.inventory.bands)
            patches = load_patchset(plan.spec.patches, d / "patches")
            self._register(StoredPlan(plan, meta["repo_url"], d / "patches", meta["submitted_at"], patches))

    def _register(self, sp: StoredPlan) -> None:
        self._plans[sp.plan.plan_id] = sp
        self.engine.register_plan(sp.plan)

    def submit_spec(
        self,
        doc: str | bytes | Mapping,
        base_dir: Optional[str | os.PathLike] = None,
        patch_bodies: Optional[Mapping[str, str]] = None,
    ) -> TestPlan:
        """Validate, compile and persist a spec; resubmitting a name replaces that plan."""
        spec = parse_spec(doc)
        plan = compile_plan(spec, self.inventory.bands)
        base = Path(base_dir).resolve() if base_dir is not None else None
        target = self.plans_dir / plan.plan_id
        staging = self.plans_dir / f".{plan.plan_id}.new"
        shutil.rmtree(staging, ignore_errors=True)
        (staging / "patches").mkdir(parents=True)
        try:
            for ref in spec.patches:
                dest = staging / "patches" / ref.path
                dest.parent.mkdir(parents=True, exist_ok=True)
                if patch_bodies is not None and ref.path in patch_bodies:
                    dest.write_text(patch_bodies[ref.path])
                elif base is not None and (base / ref.path).is_file():
                    shutil.copyfile(base / ref.path, dest)
                else:
                    raise ValidationError("patches", f"patch file {ref.path} not provided")
            load_patchset(spec.patches, staging / "patches")  # verifies pinned hashes
            text = doc if isinstance(doc, str) else doc.decode() if isinstance(doc, bytes) else None
            (staging / "spec.yaml").write_text(text if text is not None else serialize_spec(spec))
            meta = {"repo_url": _resolve_repo(spec.repo_url, base), "submitted_at": isoformat(self.clock.now())}
            (staging / "meta.json").write_text(json.dumps(meta, indent=2))
            shutil.rmtree(target, ignore_errors=True)
            os.replace(staging, target)
        finally:
            shutil.rmtree(staging, ignore_errors=True)
        patches = load_patchset(spec.patches, target / "patches")
        self._register(StoredPlan(plan, meta["repo_url"], target / "patches", meta["submitted_at"], patches))
        return plan

    def stored(self, plan_id: str) -> StoredPlan:
        try:
            return self._plans[plan_id]
        except KeyError:
            raise PlanNotFound(f"no plan {plan_id}") from None

    def plan(self, plan_id: str) -> TestPlan:
        return self.stored(plan_id).plan

    def plans(self) -> list[TestPlan]:
        return [self._plans[k].plan for k in sorted(self._plans)]

    def repo(self, plan_id: str) -> RepoRef:
        return RepoRef.from_url(self.stored(plan_id).repo_url)

    # -- runs

    def trigger(
        self,
        plan_id: str,
        trigger: Trigger | str = Trigger.MANUAL,
        schedule: Optional[str] = None,
        tasks: Optional[Iterable[str]] = None,
        wait: bool = True,
    ) -> PipelineRun:
        plan = self.plan(plan_id)
        if schedule is not None and tasks is None:
            tasks = plan.schedule(schedule).tasks
        return self.engine.start_run(plan_id, trigger, tasks, schedule, wait=wait)

    def scheduler(self, start=None) -> Scheduler:
        return Scheduler(self.engine, self.clock, start)

    def link_for(self, plan: TestPlan, test_run_id: str) -> LinkModel:
        if plan.plan_id in self.links:
            return self.links[plan.plan_id]
        return self.link_factory(plan, test_run_id)

    # -- task executors

    def _task_trigger(self, ctx: TaskContext) -> dict:
        ctx.log(f"{ctx.run.trigger.value} trigger for plan {ctx.plan.plan_id}")
        return {"trigger": ctx.run.trigger.value, "schedule": ctx.run.schedule, "at": isoformat(ctx.clock.now())}

    def _task_tag_fetch(self, ctx: TaskContext) -> dict:
        repo = self.repo(ctx.plan.plan_id)
        tag = latest_tag(repo)
        ctx.log(f"latest tag of {repo.url}: {tag.name} ({tag.commit_id})")
        return {"repo_url": repo.url, "tag": tag.to_dict()}

    def _task_registry_diff(self, ctx: TaskContext):
        sp = self.stored(ctx.plan.plan_id)
        repo = self.repo(ctx.plan.plan_id)
        decision = decide_build(open_repo(repo), self.registry, ctx.plan.spec.image_name, sp.patches)
        ctx.log(f"{decision.verdict.value}: {decision.reason}")
        out = decision.to_dict()
        if decision.verdict is BuildVerdict.NO_BUILD:
            return TaskResult(out, halt=True, reason="no new tags have been released")
        return out

    def _task_build(self, ctx: TaskContext) -> dict:
        sp = self.stored(ctx.plan.plan_id)
        diff = ctx.inputs.get("registry-diff") or {}
        if diff.get("tag"):
            tag = ReleaseTag.from_dict(diff["tag"])
        elif (ctx.inputs.get("tag-fetch") or {}).get("tag"):
            tag = ReleaseTag.from_dict(ctx.inputs["tag-fetch"]["tag"])
        else:
            tag = latest_tag(self.repo(ctx.plan.plan_id))
        artifact = build_image(tag, sp.patches, self.profile, image_name=ctx.plan.spec.image_name,
                               source=open_repo(self.repo(ctx.plan.plan_id)), registry=self.registry,
                               clock=ctx.clock)
        for line in artifact.build_log.splitlines():
            ctx.log(line)
        return {"image": artifact.to_dict()}

    def _artifact_for(self, ctx: TaskContext) -> ImageArtifact:
        built = (ctx.inputs.get("build") or {}).get("image")
        image = ctx.plan.spec.image_name
        if built:
            return self.registry.pull(built["image_name"], built["tag_name"])
        art = self.registry.latest(image)
        if art is None:
            raise ArtifactMissing(f"registry has no {image} image to deploy")
        return art

    def _task_deploy(self, ctx: TaskContext) -> dict:
        artifact = self._artifact_for(ctx)
        placement = self.inventory.match(ctx.plan.resource_claim)
        try:
            dep = self.inventory.deploy(ctx.plan, artifact, placement.placement_id)
        except BaseException:
            self.inventory.release(placement.placement_id)
            raise
        counts: dict[str, int] = {}
        for inst in dep.instances:
            counts[inst.role.value] = counts.get(inst.role.value, 0) + 1
        ctx.log(f"deployed {artifact.image_name}:{artifact.tag_name} as {dep.deployment_id} "
                f"on {placement.node_id} radios {','.join(placement.radio_ids)}: {len(dep.instances)} workloads")
        return {
            "deployment_id": dep.deployment_id,
            "placement_id": placement.placement_id,
            "node_id": placement.node_id,
            "radio_ids": list(placement.radio_ids),
            "image_name": artifact.image_name,
            "image_tag": artifact.tag_name,
            "instance_count": len(dep.instances),
            "role_counts": counts,
        }

    def _task_continuous_test(self, ctx: TaskContext) -> dict:
        dep_id = (ctx.inputs.get("deploy") or {}).get("deployment_id")
        if dep_id is None:
            raise ArtifactMissing("continuous-test needs the deploy task's deployment")
        dep = self.inventory.deployment(dep_id)
        spec = ctx.plan.spec
        test_run_id = f"{ctx.run.run_id}-t{ctx.attempt}"
        link = self.link_for(ctx.plan, test_run_id)
        self.harness.attach_ue(dep, link)
        phases = [Phase(p.target_rate_mbps, p.duration_s) for p in spec.traffic_phases]
        try:
            run = self.harness.run_traffic(dep, phases, link, run_id=test_run_id,
                                           band_id=spec.radio_band, prb_count=spec.prb_count)
        except ServerStuck as exc:
            if exc.test_run is not None:
                self.harness.report_results(exc.test_run)
                judge_run(self.vault, exc.test_run.run_id, **self.judge.as_kwargs())
                ctx.log(f"test {exc.test_run.run_id} aborted and recorded: {exc.message}")
            raise
        rec = self.harness.report_results(run)
        verdict = judge_run(self.vault, run.run_id, **self.judge.as_kwargs())
        ctx.log(f"test {run.run_id}: {verdict.outcome.value} ({verdict.reason})")
        return {
            "test_run_id": run.run_id,
            "status": run.status.value,
            "config_key": rec.config_key,
            "phase_means": [p.mean for p in rec.phases],
            "verdict": verdict.outcome.value,
            "verdict_reason": verdict.reason,
        }

    def _cleanup(self, run: PipelineRun) -> None:
        """Tear down whatever the run deployed, whether or not its test succeeded."""
        try:
            dep_task = run.task("deploy")
        except RanforgeError:
            return
        dep_id = (dep_task.output or {}).get("deployment_id")
        if dep_id:
            self.harness.teardown(self.inventory.deployment(dep_id))

    def close(self) -> None:
        self.engine.shutdown()
