"""Simulated over-the-air test flow: start gNB, attach UE, run UDP phases, tear down.

The radio link is a piecewise-constant capacity (nominal x interference scale)
with clipped Gaussian noise. Per sample::

    capacity   = nominal_capacity_mbps * scale(t)
    throughput = min(target, max(0, min(target, capacity) + noise)),  |noise| <= 3 sigma
    loss       = max(0, 1 - capacity / target)

Time is virtual: a 3-minute test costs microseconds of wall clock.
"""

from __future__ import annotations

import csv
import io
import math
import threading
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from .clock import SystemClock, isoformat
from .errors import (
    AttachTimeout,
    NoCore,
    NoTrafficServer,
    PlacementBusy,
    PlacementMissing,
    RanforgeError,
    ServerStuck,
    UeNotConnected,
    VaultUnavailable,
)
from .inventory import DeploymentRecord, Inventory, WorkloadRole

if TYPE_CHECKING:
    from .vault import RunRecord, Vault

CSV_HEADER = ("t_s", "phase", "throughput_mbps", "loss_frac")
DEFAULT_NOMINAL_MBPS = 40.0
DEFAULT_SAMPLE_PERIOD_S = 1.0
NOISE_CLIP_SIGMAS = 3.0
UE_SUBNET = "10.45.0."


class FaultKind(str, Enum):
    RADIO_UNREACHABLE = "radio_unreachable"
    SERVER_STUCK = "server_stuck"


@dataclass(frozen=True)
class InterferenceEvent:
    start_s: float
    end_s: float
    capacity_scale: float

    def covers(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


@dataclass(frozen=True)
class LinkModel:
    nominal_capacity_mbps: float = DEFAULT_NOMINAL_MBPS
    noise_std_mbps: float = 0.0
    interference_events: tuple[InterferenceEvent, ...] = ()
    seed: int = 0
    faults: frozenset[FaultKind] = frozenset()
    # simulated time at which a stuck traffic server stops answering
    stuck_at_s: float = 0.0

    def __post_init__(self):
        if not self.nominal_capacity_mbps > 0:
            raise ValueError("nominal_capacity_mbps must be > 0")
        if self.noise_std_mbps < 0:
            raise ValueError("noise_std_mbps must be >= 0")
        events = sorted(self.interference_events, key=lambda e: e.start_s)
        for e in events:
            if not 0.0 <= e.capacity_scale <= 1.0:
                raise ValueError("capacity_scale must lie in [0, 1]")
            if e.end_s <= e.start_s:
                raise ValueError("interference event must have end_s > start_s")
        for a, b in zip(events, events[1:]):
            if b.start_s < a.end_s:
                raise ValueError("interference events overlap")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "faults", frozenset(FaultKind(f) for f in self.faults))

    def scale_at(self, t: float) -> float:
        for e in self.interference_events:
            if e.covers(t):
                return e.capacity_scale
        return 1.0

    def capacity_at(self, t: float) -> float:
        return self.nominal_capacity_mbps * self.scale_at(t)

    def to_dict(self) -> dict:
        return {
            "nominal_capacity_mbps": self.nominal_capacity_mbps,
            "noise_std_mbps": self.noise_std_mbps,
            "interference_events": [
                {"start_s": e.start_s, "end_s": e.end_s, "capacity_scale": e.capacity_scale}
                for e in self.interference_events
            ],
            "seed": self.seed,
            "faults": sorted(f.value for f in self.faults),
            "stuck_at_s": self.stuck_at_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinkModel":
        return cls(
            nominal_capacity_mbps=float(d.get("nominal_capacity_mbps", DEFAULT_NOMINAL_MBPS)),
            noise_std_mbps=float(d.get("noise_std_mbps", 0.0)),
            interference_events=tuple(
                InterferenceEvent(float(e["start_s"]), float(e["end_s"]), float(e["capacity_scale"]))
                for e in d.get("interference_events", [])
            ),
            seed=int(d.get("seed", 0)),
            faults=frozenset(FaultKind(f) for f in d.get("faults", [])),
            stuck_at_s=float(d.get("stuck_at_s", 0.0)),
        )


@dataclass(frozen=True)
class Phase:
    target_rate_mbps: float
    duration_s: int


@dataclass(frozen=True)
class Sample:
    t_s: float
    phase_index: int
    throughput_mbps: float
    packet_loss_frac: float


@dataclass(frozen=True)
class KpiSeries:
    samples: tuple[Sample, ...]
    sample_period_s: float = DEFAULT_SAMPLE_PERIOD_S

    def phase(self, index: int) -> list[Sample]:
        return [s for s in self.samples if s.phase_index == index]

    def throughput(self, index: int) -> list[float]:
        return [s.throughput_mbps for s in self.samples if s.phase_index == index]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in self.samples:
            # repr gives the shortest string that round-trips the float exactly
            w.writerow((repr(s.t_s), s.phase_index, repr(s.throughput_mbps), repr(s.packet_loss_frac)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, sample_period_s: float = DEFAULT_SAMPLE_PERIOD_S) -> "KpiSeries":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError("KPI CSV must start with header " + ",".join(CSV_HEADER))
        samples = tuple(Sample(float(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in rows[1:] if r)
        return cls(samples, sample_period_s)


class TestStatus(str, Enum):
    __test__ = False

    COMPLETED = "COMPLETED"
    ABORTED = "ABORTED"


@dataclass
class TestRun:
    run_id: str
    deployment_id: str
    plan_id: str
    phases: tuple[Phase, ...]
    series: KpiSeries
    status: TestStatus
    started_at: str
    image_name: str = ""
    image_tag: str = ""
    band_id: str = ""
    prb_count: int = 0
    abort_reason: Optional[str] = None

    __test__ = False

    def to_dict(self, with_samples: bool = True) -> dict:
        d = {
            "run_id": self.run_id,
            "deployment_id": self.deployment_id,
            "plan_id": self.plan_id,
            "phases": [{"target_rate_mbps": p.target_rate_mbps, "duration_s": p.duration_s} for p in self.phases],
            "status": self.status.value,
            "abort_reason": self.abort_reason,
            "started_at": self.started_at,
            "image_name": self.image_name,
            "image_tag": self.image_tag,
            "band_id": self.band_id,
            "prb_count": self.prb_count,
            "sample_period_s": self.series.sample_period_s,
            "sample_count": len(self.series.samples),
        }
        if with_samples:
            d["samples"] = [
                {"t_s": s.t_s, "phase": s.phase_index, "throughput_mbps": s.throughput_mbps,
                 "loss_frac": s.packet_loss_frac}
                for s in self.series.samples
            ]
        return d


def simulate_series(
    phases: Iterable[Phase],
    link: LinkModel,
    sample_period_s: float = DEFAULT_SAMPLE_PERIOD_S,
) -> tuple[KpiSeries, Optional[float]]:
    """Sample every phase back to back; returns the series and the abort time (if stuck)."""
    rng = np.random.default_rng(link.seed)
    sigma = link.noise_std_mbps
    stuck = FaultKind.SERVER_STUCK in link.faults
    samples: list[Sample] = []
    elapsed = 0
    for index, phase in enumerate(phases):
        n = phase.duration_s / sample_period_s
        if not float(n).is_integer():
            raise ValueError(f"phase {index}: duration {phase.duration_s}s not a multiple of the sample period")
        for _ in range(int(n)):
            t = elapsed * sample_period_s
            if stuck and t >= link.stuck_at_s:
                return KpiSeries(tuple(samples), sample_period_s), t
            target = phase.target_rate_mbps
            cap = link.capacity_at(t)
            thr = min(target, cap)
            if sigma > 0:
                noise = float(np.clip(rng.normal(0.0, sigma), -NOISE_CLIP_SIGMAS * sigma, NOISE_CLIP_SIGMAS * sigma))
                thr = min(target, max(0.0, thr + noise))
            loss = max(0.0, 1.0 - cap / target)
            samples.append(Sample(t, index, thr, loss))
            elapsed += 1
    return KpiSeries(tuple(samples), sample_period_s), None


@dataclass(frozen=True)
class AttachReceipt:
    ue_id: str
    assigned_ip: str
    route_installed: bool

    def to_dict(self) -> dict:
        return {"ue_id": self.ue_id, "assigned_ip": self.assigned_ip, "route_installed": self.route_installed}


@dataclass
class _UeSession:
    receipt: AttachReceipt
    deployment_id: str
    state: str = "CONNECTED"


@dataclass
class _GnbSession:
    deployment_id: str
    node_id: str
    radio_id: str
    state: str = "RUNNING"


class AirtestHarness:
    """Drives the gNB and UE control agents against a simulated link."""

    def __init__(
        self,
        inventory: Inventory,
        vault: Optional["Vault"] = None,
        clock=None,
        sample_period_s: float = DEFAULT_SAMPLE_PERIOD_S,
    ):
        self.inventory = inventory
        self.vault = vault
        self.clock = clock or SystemClock()
        self.sample_period_s = sample_period_s
        self._lock = threading.Lock()
        self._gnbs: dict[str, _GnbSession] = {}
        self._ues: dict[str, _UeSession] = {}
        self._busy: dict[str, str] = {}
        self._faults: dict[str, set[FaultKind]] = {}
        self._torn_down: dict[str, dict] = {}
        self._next_ip = 2

    def inject_fault(self, deployment_id: str, kind: FaultKind | str) -> None:
        self._faults.setdefault(deployment_id, set()).add(FaultKind(kind))

    def clear_faults(self, deployment_id: str) -> None:
        self._faults.pop(deployment_id, None)

    def _faults_for(self, deployment: DeploymentRecord, link: Optional[LinkModel]) -> set[FaultKind]:
        return set(self._faults.get(deployment.deployment_id, set())) | (set(link.faults) if link else set())

    def _bound_gnb(self, deployment: DeploymentRecord):
        gnbs = deployment.by_role(WorkloadRole.GNB)
        if len(gnbs) != 1 or gnbs[0].radio_id is None:
            raise PlacementMissing(f"deployment {deployment.deployment_id} needs exactly one radio-bound gNB")
        if not deployment.active:
            raise PlacementMissing(f"deployment {deployment.deployment_id} was torn down")
        return gnbs[0]

    # -- gNB agent

    def start_gnb(self, deployment: DeploymentRecord) -> dict:
        gnb = self._bound_gnb(deployment)
        with self._lock:
            sess = self._gnbs.get(deployment.deployment_id)
            if sess is None:
                sess = _GnbSession(deployment.deployment_id, gnb.node_id, gnb.radio_id)
                self._gnbs[deployment.deployment_id] = sess
        return {"deployment_id": deployment.deployment_id, "gnb": gnb.instance_id, "node_id": sess.node_id,
                "radio_id": sess.radio_id, "state": sess.state}

    # -- UE agent

    def attach_ue(self, deployment: DeploymentRecord, link: Optional[LinkModel] = None) -> AttachReceipt:
        """Power the UE, wait for registration, install the default route via the gNB."""
        self._bound_gnb(deployment)
        if not deployment.by_role(WorkloadRole.CORE_FUNCTION):
            raise NoCore(f"deployment {deployment.deployment_id} has no core network functions")
        self.start_gnb(deployment)
        if FaultKind.RADIO_UNREACHABLE in self._faults_for(deployment, link):
            raise AttachTimeout(f"UE did not attach: gNB cannot reach its radio ({deployment.deployment_id})")
        with self._lock:
            sess = self._ues.get(deployment.deployment_id)
            if sess is None or sess.state != "CONNECTED":
                receipt = AttachReceipt(f"ue-{deployment.deployment_id}", f"{UE_SUBNET}{self._next_ip}", True)
                self._next_ip += 1
                sess = _UeSession(receipt, deployment.deployment_id)
                self._ues[deployment.deployment_id] = sess
            return sess.receipt

    def ue_state(self, deployment_id: str) -> str:
        sess = self._ues.get(deployment_id)
        return sess.state if sess else "DETACHED"

    def run_traffic(
        self,
        deployment: DeploymentRecord,
        phases: Iterable[Phase | tuple],
        link: LinkModel,
        run_id: Optional[str] = None,
        band_id: str = "",
        prb_count: int = 0,
    ) -> TestRun:
        """Run every phase against ``link``; raises :class:`ServerStuck` carrying the aborted run."""
        phases = tuple(p if isinstance(p, Phase) else Phase(float(p[0]), int(p[1])) for p in phases)
        if self.ue_state(deployment.deployment_id) != "CONNECTED":
            raise UeNotConnected(f"UE for {deployment.deployment_id} is not connected")
        if not deployment.by_role(WorkloadRole.TRAFFIC_SERVER):
            raise NoTrafficServer(f"deployment {deployment.deployment_id} has no traffic server")
        faults = self._faults_for(deployment, link)
        if faults != set(link.faults):
            link = LinkModel(**{**link.__dict__, "faults": frozenset(faults)})

        with self._lock:
            holder = self._busy.get(deployment.placement_id)
            if holder is not None:
                raise PlacementBusy(f"placement {deployment.placement_id} is running test {holder}")
            run_id = run_id or f"tr-{uuid.uuid4().hex[:12]}"
            self._busy[deployment.placement_id] = run_id
        try:
            started = self.clock.now()
            series, aborted_at = simulate_series(phases, link, self.sample_period_s)
            if hasattr(self.clock, "advance"):
                total = aborted_at if aborted_at is not None else sum(p.duration_s for p in phases)
                self.clock.advance(total)
        finally:
            with self._lock:
                self._busy.pop(deployment.placement_id, None)

        run = TestRun(
            run_id=run_id,
            deployment_id=deployment.deployment_id,
            plan_id=deployment.plan_id,
            phases=phases,
            series=series,
            status=TestStatus.COMPLETED if aborted_at is None else TestStatus.ABORTED,
            started_at=isoformat(started),
            image_name=deployment.image_name,
            image_tag=deployment.image_tag,
            band_id=band_id,
            prb_count=prb_count,
            abort_reason=None if aborted_at is None else f"traffic server stuck at t={aborted_at:g}s",
        )
        if aborted_at is not None:
            raise ServerStuck(run.abort_reason, test_run=run)
        return run

    def teardown(self, deployment: DeploymentRecord) -> dict:
        """Detach the UE, drop its routes, stop the gNB, release the placement. Idempotent."""
        did = deployment.deployment_id
        with self._lock:
            if did in self._torn_down:
                return self._torn_down[did]
            ue = self._ues.get(did)
            if ue is not None:
                ue.state = "DETACHED"
            self._gnbs.pop(did, None)
        self.inventory.retire(did)
        confirmation = {
            "deployment_id": did,
            "placement_id": deployment.placement_id,
            "ue_detached": True,
            "routes_removed": True,
            "gnb_stopped": True,
            "placement_released": True,
        }
        with self._lock:
            self._torn_down[did] = confirmation
        return confirmation

    def report_results(self, run: TestRun) -> "RunRecord":
        if self.vault is None:
            raise VaultUnavailable("no vault configured")
        try:
            return self.vault.ingest(run)
        except VaultUnavailable:
            raise
        except (OSError, RanforgeError) as exc:
            if isinstance(exc, RanforgeError) and not exc.retryable:
                raise
            raise VaultUnavailable(f"vault rejected run {run.run_id}: {exc}") from exc


def phase_means(series: KpiSeries, n_phases: int) -> list[float]:
    out = []
    for i in range(n_phases):
        vals = series.throughput(i)
        out.append(math.fsum(vals) / len(vals) if vals else float("nan"))
    return out
