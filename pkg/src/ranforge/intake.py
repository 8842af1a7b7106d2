"""Operator test specifications and their compilation into executable plans.

A spec is a single YAML (or JSON) document; see ``data/example_spec.yaml`` for
an annotated example. ``parse_spec`` validates it into a :class:`TestSpec`,
``compile_plan`` turns that into a :class:`TestPlan`: the six-task gNB pipeline
graph, the resource claim, and the two cron schedules.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from importlib import resources
from typing import Any, Mapping, Optional

import yaml

from . import cron
from .errors import InvalidCron, SpecSyntaxError, UnsupportedBand, ValidationError
from .inventory import (
    GiB,
    Duplex,
    LatencyClass,
    ResourceClaim,
    SpectrumBand,
    WorkloadRole,
    default_band_catalog,
)

TASKS = ("trigger", "tag-fetch", "registry-diff", "build", "deploy", "continuous-test")
TEST_ONLY_TASKS = ("trigger", "deploy", "continuous-test")

DEFAULT_ISOLATED_CORES = 4
DEFAULT_HUGEPAGE_GIB = 2

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_IMAGE_RE = re.compile(r"^[a-z0-9][a-z0-9._/-]*$")
_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")

_FIELDS = (
    "name",
    "repo_url",
    "image_name",
    "patches",
    "traffic_phases",
    "radio_band",
    "center_freq_hz",
    "prb_count",
    "duplex",
    "test_cadence",
    "tag_check_cadence",
    "resources",
    "requirements",
    "deployment_manifest",
)
_REQUIRED = {
    "name",
    "repo_url",
    "image_name",
    "traffic_phases",
    "radio_band",
    "center_freq_hz",
    "prb_count",
    "duplex",
    "test_cadence",
    "tag_check_cadence",
}


@dataclass(frozen=True)
class PatchRef:
    path: str
    sha256: str


@dataclass(frozen=True)
class TrafficPhase:
    target_rate_mbps: float
    duration_s: int


@dataclass(frozen=True)
class WorkloadDecl:
    role: WorkloadRole
    replicas: int = 1
    latency_class: LatencyClass = LatencyClass.GENERAL


DEFAULT_MANIFEST = (
    WorkloadDecl(WorkloadRole.GNB, 1, LatencyClass.LOW_LATENCY),
    WorkloadDecl(WorkloadRole.TRAFFIC_SERVER, 1, LatencyClass.GENERAL),
    WorkloadDecl(WorkloadRole.DATA_COLLECTOR, 3, LatencyClass.GENERAL),
    WorkloadDecl(WorkloadRole.DASHBOARD, 3, LatencyClass.GENERAL),
    WorkloadDecl(WorkloadRole.CORE_FUNCTION, 27, LatencyClass.GENERAL),
)


@dataclass(frozen=True)
class TestSpec:
    name: str
    repo_url: str
    image_name: str
    traffic_phases: tuple[TrafficPhase, ...]
    radio_band: str
    center_freq_hz: float
    prb_count: int
    duplex: Duplex
    test_cadence: str
    tag_check_cadence: str
    patches: tuple[PatchRef, ...] = ()
    deployment_manifest: tuple[WorkloadDecl, ...] = DEFAULT_MANIFEST
    isolated_cores: int = DEFAULT_ISOLATED_CORES
    hugepage_gib: float = DEFAULT_HUGEPAGE_GIB
    requirements: Mapping[str, Any] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def phase_targets(self) -> tuple[float, ...]:
        return tuple(p.target_rate_mbps for p in self.traffic_phases)


# -- parsing ----------------------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _real(d: Mapping, key: str, where: str) -> float:
    v = d.get(key)
    if isinstance(v, str):
        # PyYAML reads exponent forms like 3.62e9 as strings
        try:
            v = float(v)
        except ValueError:
            raise ValidationError(where, f"expected a number, got {v!r}") from None
    if not _is_number(v) or not math.isfinite(v):
        raise ValidationError(where, f"expected a number, got {v!r}")
    return float(v)


def _int(d: Mapping, key: str, where: str) -> int:
    v = d.get(key)
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ValidationError(where, f"expected an integer, got {v!r}")
    return v


def _str(d: Mapping, key: str, where: str) -> str:
    v = d.get(key)
    if not isinstance(v, str) or not v.strip():
        raise ValidationError(where, "expected a non-empty string")
    return v


def _enum(enum_cls, v: Any, where: str):
    try:
        return enum_cls(str(v).upper() if isinstance(v, str) else v)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise ValidationError(where, f"expected one of {allowed}, got {v!r}") from None


def _load_document(doc: str | bytes | Mapping) -> Mapping:
    if isinstance(doc, Mapping):
        return doc
    try:
        data = yaml.safe_load(doc)
    except yaml.YAMLError as exc:
        raise SpecSyntaxError(f"malformed spec document: {exc}") from exc
    if not isinstance(data, Mapping):
        raise SpecSyntaxError("spec document must be a mapping at top level")
    return data


def _parse_manifest(raw: Any) -> tuple[WorkloadDecl, ...]:
    if not isinstance(raw, list):
        raise ValidationError("deployment_manifest", "expected a list")
    decls = []
    for i, item in enumerate(raw):
        where = f"deployment_manifest[{i}]"
        if not isinstance(item, Mapping):
            raise ValidationError(where, "expected a mapping")
        role = _enum(WorkloadRole, item.get("role"), f"{where}.role")
        replicas = _int(item, "replicas", f"{where}.replicas") if "replicas" in item else 1
        if replicas < 1:
            raise ValidationError(f"{where}.replicas", "must be >= 1")
        default_lc = LatencyClass.LOW_LATENCY if role is WorkloadRole.GNB else LatencyClass.GENERAL
        lc = _enum(LatencyClass, item.get("latency_class", default_lc.value), f"{where}.latency_class")
        if role is WorkloadRole.GNB and lc is not LatencyClass.LOW_LATENCY:
            raise ValidationError(f"{where}.latency_class", "GNB workloads require LOW_LATENCY")
        decls.append(WorkloadDecl(role, replicas, lc))
    return tuple(decls)


def parse_spec(doc: str | bytes | Mapping) -> TestSpec:
    """Parse and validate a spec document.

    Raises :class:`SpecSyntaxError` for documents that are not well-formed
    YAML/JSON mappings and :class:`ValidationError` (naming the offending
    field) for well-formed documents that break an invariant.
    """
    d = _load_document(doc)
    for key in d:
        if key not in _FIELDS:
            raise ValidationError(str(key), "unknown field")
    for key in sorted(_REQUIRED):
        if key not in d:
            raise ValidationError(key, "missing required field")

    name = _str(d, "name", "name")
    if not _NAME_RE.match(name):
        raise ValidationError("name", "must be an identifier ([A-Za-z0-9._-])")
    image_name = _str(d, "image_name", "image_name")
    if not _IMAGE_RE.match(image_name):
        raise ValidationError("image_name", "must be a lowercase image repository name")

    raw_phases = d.get("traffic_phases")
    if not isinstance(raw_phases, list) or not raw_phases:
        raise ValidationError("traffic_phases", "at least one traffic phase is required")
    phases = []
    for i, ph in enumerate(raw_phases):
        where = f"traffic_phases[{i}]"
        if not isinstance(ph, Mapping):
            raise ValidationError(where, "expected a mapping")
        rate = _real(ph, "target_rate_mbps", f"{where}.target_rate_mbps")
        if rate <= 0:
            raise ValidationError(f"{where}.target_rate_mbps", "must be > 0")
        dur = _int(ph, "duration_s", f"{where}.duration_s")
        if dur <= 0:
            raise ValidationError(f"{where}.duration_s", "must be > 0")
        phases.append(TrafficPhase(rate, dur))

    center = _real(d, "center_freq_hz", "center_freq_hz")
    if center <= 0:
        raise ValidationError("center_freq_hz", "must be > 0")
    prbs = _int(d, "prb_count", "prb_count")
    if prbs <= 0:
        raise ValidationError("prb_count", "must be > 0")

    cadences = {}
    for key in ("test_cadence", "tag_check_cadence"):
        expr = _str(d, key, key)
        try:
            cron.normalize(expr)
        except InvalidCron as exc:
            raise ValidationError(key, exc.message) from None
        cadences[key] = expr

    patches = []
    raw_patches = d.get("patches") or []
    if not isinstance(raw_patches, list):
        raise ValidationError("patches", "expected a list")
    for i, p in enumerate(raw_patches):
        where = f"patches[{i}]"
        if not isinstance(p, Mapping):
            raise ValidationError(where, "expected a mapping with path and sha256")
        path = _str(p, "path", f"{where}.path")
        digest = _str(p, "sha256", f"{where}.sha256").lower()
        if not _HEX64_RE.match(digest):
            raise ValidationError(f"{where}.sha256", "expected 64 hex characters")
        patches.append(PatchRef(path, digest))

    res = d.get("resources") or {}
    if not isinstance(res, Mapping):
        raise ValidationError("resources", "expected a mapping")
    for key in res:
        if key not in ("isolated_cores", "hugepage_gib"):
            raise ValidationError(f"resources.{key}", "unknown field")
    cores = _int(res, "isolated_cores", "resources.isolated_cores") if "isolated_cores" in res else DEFAULT_ISOLATED_CORES
    hp = _real(res, "hugepage_gib", "resources.hugepage_gib") if "hugepage_gib" in res else DEFAULT_HUGEPAGE_GIB
    if cores < 0:
        raise ValidationError("resources.isolated_cores", "must be >= 0")
    if hp < 0:
        raise ValidationError("resources.hugepage_gib", "must be >= 0")

    reqs = d.get("requirements") or {}
    if not isinstance(reqs, Mapping):
        raise ValidationError("requirements", "expected a mapping")

    manifest = _parse_manifest(d["deployment_manifest"]) if "deployment_manifest" in d else DEFAULT_MANIFEST

    return TestSpec(
        name=name,
        repo_url=_str(d, "repo_url", "repo_url"),
        image_name=image_name,
        traffic_phases=tuple(phases),
        radio_band=_str(d, "radio_band", "radio_band"),
        center_freq_hz=center,
        prb_count=prbs,
        duplex=_enum(Duplex, d.get("duplex"), "duplex"),
        test_cadence=cadences["test_cadence"],
        tag_check_cadence=cadences["tag_check_cadence"],
        patches=tuple(patches),
        deployment_manifest=manifest,
        isolated_cores=cores,
        hugepage_gib=float(hp) if not float(hp).is_integer() else int(hp),
        requirements=dict(reqs),
    )


def spec_to_dict(spec: TestSpec) -> dict:
    return {
        "name": spec.name,
        "repo_url": spec.repo_url,
        "image_name": spec.image_name,
        "patches": [{"path": p.path, "sha256": p.sha256} for p in spec.patches],
        "traffic_phases": [
            {"target_rate_mbps": p.target_rate_mbps, "duration_s": p.duration_s} for p in spec.traffic_phases
        ],
        "radio_band": spec.radio_band,
        "center_freq_hz": spec.center_freq_hz,
        "prb_count": spec.prb_count,
        "duplex": spec.duplex.value,
        "test_cadence": spec.test_cadence,
        "tag_check_cadence": spec.tag_check_cadence,
        "resources": {"isolated_cores": spec.isolated_cores, "hugepage_gib": spec.hugepage_gib},
        "requirements": dict(spec.requirements),
        "deployment_manifest": [
            {"role": w.role.value, "replicas": w.replicas, "latency_class": w.latency_class.value}
            for w in spec.deployment_manifest
        ],
    }


def serialize_spec(spec: TestSpec) -> str:
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False, default_flow_style=False)


def example_spec_text() -> str:
    return resources.files("ranforge").joinpath("data/example_spec.yaml").read_text()


# -- plans ------------------------------------------------------------------


@dataclass(frozen=True)
class TaskNode:
    name: str
    deps: tuple[str, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Schedule:
    name: str
    cadence: str
    tasks: tuple[str, ...]


@dataclass(frozen=True)
class TestPlan:
    plan_id: str
    spec_id: str
    spec: TestSpec
    tasks: tuple[TaskNode, ...]
    resource_claim: ResourceClaim
    schedules: tuple[Schedule, ...]

    __test__ = False

    @property
    def manifest(self) -> tuple[WorkloadDecl, ...]:
        return self.spec.deployment_manifest

    @property
    def workload_count(self) -> int:
        return sum(w.replicas for w in self.manifest)

    def task(self, name: str) -> TaskNode:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def graph(self) -> dict[str, tuple[str, ...]]:
        return {t.name: t.deps for t in self.tasks}

    def topological_order(self) -> list[str]:
        return list(TopologicalSorter(self.graph()).static_order())

    def schedule(self, name: str) -> Schedule:
        for s in self.schedules:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "spec_id": self.spec_id,
            "spec": spec_to_dict(self.spec),
            "tasks": [{"name": t.name, "deps": list(t.deps), "params": dict(t.params)} for t in self.tasks],
            "resource_claim": self.resource_claim.to_dict(),
            "schedules": [{"name": s.name, "cadence": s.cadence, "tasks": list(s.tasks)} for s in self.schedules],
        }


def spec_id_for(spec: TestSpec) -> str:
    digest = hashlib.sha256(serialize_spec(spec).encode()).hexdigest()
    return f"{spec.name}@{digest[:12]}"


def compile_plan(spec: TestSpec, catalog: Optional[Mapping[str, SpectrumBand]] = None) -> TestPlan:
    """Compile a validated spec into a :class:`TestPlan`."""
    catalog = default_band_catalog() if catalog is None else catalog
    band = catalog.get(spec.radio_band)
    if band is None:
        raise UnsupportedBand(f"band {spec.radio_band!r} not in spectrum catalog")
    if not band.contains(spec.center_freq_hz):
        raise ValidationError(
            "center_freq_hz", f"{spec.center_freq_hz:g} Hz outside band {band.band_id}"
        )
    if spec.prb_count > band.max_prb:
        raise ValidationError("prb_count", f"band {band.band_id} carries at most {band.max_prb} PRB")
    if spec.duplex is not band.duplex:
        raise ValidationError("duplex", f"band {band.band_id} is {band.duplex.value}")
    gnbs = [w for w in spec.deployment_manifest if w.role is WorkloadRole.GNB]
    if len(gnbs) != 1 or gnbs[0].replicas != 1:
        raise ValidationError("deployment_manifest", "exactly one GNB workload with replicas 1 is required")

    claim = ResourceClaim(
        isolated_cores_needed=spec.isolated_cores,
        hugepage_bytes_needed=int(round(spec.hugepage_gib * GiB)),
        latency_class=LatencyClass.LOW_LATENCY,
        radios_needed=1,
        band_id=band.band_id,
        prbs_needed=spec.prb_count,
    )
    workloads = [{"role": w.role.value, "replicas": w.replicas} for w in spec.deployment_manifest]
    params: dict[str, dict] = {
        "trigger": {},
        "tag-fetch": {"repo_url": spec.repo_url},
        "registry-diff": {"image_name": spec.image_name},
        "build": {"image_name": spec.image_name, "patches": [p.path for p in spec.patches]},
        "deploy": {"workloads": workloads, "instance_count": sum(w["replicas"] for w in workloads)},
        "continuous-test": {"phases": [[p.target_rate_mbps, p.duration_s] for p in spec.traffic_phases]},
    }
    tasks = tuple(
        TaskNode(name, (TASKS[i - 1],) if i else (), params[name]) for i, name in enumerate(TASKS)
    )
    plan = TestPlan(
        plan_id=spec.name,
        spec_id=spec_id_for(spec),
        spec=spec,
        tasks=tasks,
        resource_claim=claim,
        schedules=(
            Schedule("pipeline", spec.tag_check_cadence, TASKS),
            Schedule("test", spec.test_cadence, TEST_ONLY_TASKS),
        ),
    )
    try:
        plan.topological_order()
    except CycleError as exc:  # pragma: no cover - the fixed graph is a chain
        raise ValidationError("tasks", f"task graph has a cycle: {exc}") from exc
    return plan


def plan_from_dict(d: Mapping) -> TestPlan:
    """Rebuild a stored plan by recompiling its spec so the stored document stays authoritative."""
    return compile_plan(parse_spec(d["spec"]))
