"""Compute / radio / spectrum inventory and atomic resource placement.

The inventory is the single authority for what is free. ``match`` and
``release`` run under one lock, so no two placements can observe the same
free capacity. Discovery reads take the same lock briefly and return copies.

Inventory file format (YAML or JSON, ``version: 1``)::

    version: 1
    bands:
      - {band_id: n48, freq_lo_hz: 3.55e+9, freq_hi_hz: 3.7e+9, max_prb: 162, duplex: TDD}
    nodes:
      - node_id: worker-rt-0
        role: WORKER_RT            # or CONTROL_PLANE
        logical_cores: 32
        reserved_cores: "0,1"      # cpuset list syntax
        isolated_cores: "2-31"
        hugepages: {page_size: 1G, count: 64}
        nics: [{name: cx6-0, mode: PASSTHROUGH_SHARED, link_gbps: 100}]
        realtime_kernel: true
        power_hint: HIGH_POWER     # or DEFAULT
    radios:
      - {radio_id: x410-0, model: USRP X410, bands: [n48], attached_node: worker-rt-0,
         link: cx6-0, state: AVAILABLE}
"""

from __future__ import annotations

import copy
import functools
import json
import math
import os
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Optional

import yaml

from .clock import SystemClock, isoformat
from .errors import (
    ArtifactMissing,
    BandExhausted,
    ConfigInvalid,
    DeploymentNotFound,
    NoFeasibleNode,
    NotActive,
    PlacementMissing,
    PlacementNotFound,
    UnsupportedBand,
)

if TYPE_CHECKING:
    from .forge import ImageArtifact

INVENTORY_VERSION = 1
GiB = 1 << 30
MiB = 1 << 20


class NodeRole(str, Enum):
    CONTROL_PLANE = "CONTROL_PLANE"
    WORKER_RT = "WORKER_RT"


class NicMode(str, Enum):
    PASSTHROUGH_SHARED = "PASSTHROUGH_SHARED"
    VIRTUAL_BRIDGED = "VIRTUAL_BRIDGED"


class PowerHint(str, Enum):
    HIGH_POWER = "HIGH_POWER"
    DEFAULT = "DEFAULT"


class RadioState(str, Enum):
    AVAILABLE = "AVAILABLE"
    CLAIMED = "CLAIMED"
    OFFLINE = "OFFLINE"


class PlacementState(str, Enum):
    ACTIVE = "ACTIVE"
    RELEASED = "RELEASED"


class LatencyClass(str, Enum):
    LOW_LATENCY = "LOW_LATENCY"
    GENERAL = "GENERAL"


class Duplex(str, Enum):
    TDD = "TDD"
    FDD = "FDD"


class WorkloadRole(str, Enum):
    GNB = "GNB"
    TRAFFIC_SERVER = "TRAFFIC_SERVER"
    DATA_COLLECTOR = "DATA_COLLECTOR"
    DASHBOARD = "DASHBOARD"
    CORE_FUNCTION = "CORE_FUNCTION"


def parse_cpuset(spec: str | int | Iterable[int]) -> frozenset[int]:
    """Parse cpuset list syntax (``"0,1"``, ``"2-31"``, ``"0-3,8"``)."""
    if isinstance(spec, int):
        return frozenset([spec])
    if not isinstance(spec, str):
        return frozenset(int(c) for c in spec)
    cores: set[int] = set()
    for part in spec.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError(f"descending cpuset range {part!r}")
            cores.update(range(a, b + 1))
        else:
            cores.add(int(part))
    return frozenset(cores)


def format_cpuset(cores: Iterable[int]) -> str:
    ids = sorted(set(cores))
    runs: list[str] = []
    i = 0
    while i < len(ids):
        j = i
        while j + 1 < len(ids) and ids[j + 1] == ids[j] + 1:
            j += 1
        runs.append(str(ids[i]) if i == j else f"{ids[i]}-{ids[j]}")
        i = j + 1
    return ",".join(runs)


_SIZE_UNITS = {"K": 1 << 10, "M": MiB, "G": GiB}


def parse_size(value: str | int) -> int:
    if isinstance(value, int):
        return value
    v = value.strip().upper().removesuffix("B").removesuffix("I")
    if v and v[-1] in _SIZE_UNITS:
        return int(float(v[:-1]) * _SIZE_UNITS[v[-1]])
    return int(v)


@dataclass(frozen=True)
class Nic:
    name: str
    mode: NicMode
    link_gbps: float


@dataclass(frozen=True)
class Hugepages:
    page_size_bytes: int
    count: int

    @property
    def total_bytes(self) -> int:
        return self.page_size_bytes * self.count


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    role: NodeRole
    logical_cores: int
    reserved_cores: frozenset[int]
    isolated_cores: frozenset[int]
    hugepages: Hugepages
    nics: tuple[Nic, ...] = ()
    realtime_kernel: bool = False
    power_hint: PowerHint = PowerHint.DEFAULT

    def __post_init__(self):
        if self.reserved_cores & self.isolated_cores:
            raise ConfigInvalid(
                f"node {self.node_id}: reserved and isolated cores overlap "
                f"({format_cpuset(self.reserved_cores & self.isolated_cores)})"
            )
        if len(self.reserved_cores | self.isolated_cores) > self.logical_cores:
            raise ConfigInvalid(f"node {self.node_id}: more reserved+isolated cores than logical cores")
        if any(c < 0 or c >= self.logical_cores for c in self.reserved_cores | self.isolated_cores):
            raise ConfigInvalid(f"node {self.node_id}: core id outside 0..{self.logical_cores - 1}")
        if self.role is NodeRole.WORKER_RT and not self.realtime_kernel:
            raise ConfigInvalid(f"node {self.node_id}: WORKER_RT requires a realtime kernel")


@dataclass(frozen=True)
class SpectrumBand:
    band_id: str
    freq_lo_hz: float
    freq_hi_hz: float
    max_prb: int
    duplex: Duplex

    def __post_init__(self):
        if self.max_prb <= 0:
            raise ConfigInvalid(f"band {self.band_id}: max_prb must be > 0")
        if not self.freq_lo_hz < self.freq_hi_hz:
            raise ConfigInvalid(f"band {self.band_id}: empty frequency range")

    def contains(self, freq_hz: float) -> bool:
        return self.freq_lo_hz <= freq_hz <= self.freq_hi_hz


@dataclass(frozen=True)
class RadioDevice:
    radio_id: str
    model: str
    bands: frozenset[str]
    attached_node: str
    link: str
    state: RadioState = RadioState.AVAILABLE


@dataclass(frozen=True)
class ResourceClaim:
    isolated_cores_needed: int = 4
    hugepage_bytes_needed: int = 2 * GiB
    latency_class: LatencyClass = LatencyClass.LOW_LATENCY
    radios_needed: int = 1
    band_id: Optional[str] = None
    prbs_needed: int = 0

    def __post_init__(self):
        for name in ("isolated_cores_needed", "hugepage_bytes_needed", "radios_needed", "prbs_needed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.radios_needed > 0 and not self.band_id:
            raise ValueError("radios_needed > 0 requires band_id")

    def to_dict(self) -> dict:
        return {
            "isolated_cores_needed": self.isolated_cores_needed,
            "hugepage_bytes_needed": self.hugepage_bytes_needed,
            "latency_class": self.latency_class.value,
            "radios_needed": self.radios_needed,
            "band_id": self.band_id,
            "prbs_needed": self.prbs_needed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceClaim":
        return cls(
            isolated_cores_needed=int(d["isolated_cores_needed"]),
            hugepage_bytes_needed=int(d["hugepage_bytes_needed"]),
            latency_class=LatencyClass(d["latency_class"]),
            radios_needed=int(d["radios_needed"]),
            band_id=d.get("band_id"),
            prbs_needed=int(d["prbs_needed"]),
        )


@dataclass(frozen=True)
class Placement:
    placement_id: str
    node_id: str
    cores: frozenset[int]
    hugepage_pages: int
    hugepage_bytes: int
    radio_ids: tuple[str, ...]
    band_id: Optional[str]
    prbs: int
    state: PlacementState = PlacementState.ACTIVE

    def to_dict(self) -> dict:
        return {
            "placement_id": self.placement_id,
            "node_id": self.node_id,
            "cores": format_cpuset(self.cores),
            "hugepage_pages": self.hugepage_pages,
            "hugepage_bytes": self.hugepage_bytes,
            "radio_ids": list(self.radio_ids),
            "band_id": self.band_id,
            "prbs": self.prbs,
            "state": self.state.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        return cls(
            placement_id=d["placement_id"],
            node_id=d["node_id"],
            cores=parse_cpuset(d["cores"]),
            hugepage_pages=int(d["hugepage_pages"]),
            hugepage_bytes=int(d["hugepage_bytes"]),
            radio_ids=tuple(d["radio_ids"]),
            band_id=d.get("band_id"),
            prbs=int(d["prbs"]),
            state=PlacementState(d["state"]),
        )


@dataclass(frozen=True)
class WorkloadInstance:
    instance_id: str
    role: WorkloadRole
    node_id: str
    radio_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "role": self.role.value,
            "node_id": self.node_id,
            "radio_id": self.radio_id,
        }


@dataclass
class DeploymentRecord:
    deployment_id: str
    plan_id: str
    placement_id: str
    image_name: str
    image_tag: str
    image_digest: str
    instances: list[WorkloadInstance]
    created_at: str
    active: bool = True

    def by_role(self, role: WorkloadRole) -> list[WorkloadInstance]:
        return [i for i in self.instances if i.role is role]

    def to_dict(self) -> dict:
        return {
            "deployment_id": self.deployment_id,
            "plan_id": self.plan_id,
            "placement_id": self.placement_id,
            "image_name": self.image_name,
            "image_tag": self.image_tag,
            "image_digest": self.image_digest,
            "instances": [i.to_dict() for i in self.instances],
            "created_at": self.created_at,
            "active": self.active,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentRecord":
        return cls(
            deployment_id=d["deployment_id"],
            plan_id=d["plan_id"],
            placement_id=d["placement_id"],
            image_name=d["image_name"],
            image_tag=d["image_tag"],
            image_digest=d["image_digest"],
            instances=[
                WorkloadInstance(i["instance_id"], WorkloadRole(i["role"]), i["node_id"], i.get("radio_id"))
                for i in d["instances"]
            ],
            created_at=d["created_at"],
            active=bool(d.get("active", True)),
        )


def radio_to_dict(r: RadioDevice) -> dict:
    return {
        "radio_id": r.radio_id,
        "model": r.model,
        "bands": sorted(r.bands),
        "attached_node": r.attached_node,
        "link": r.link,
        "state": r.state.value,
    }


def node_to_dict(n: NodeProfile) -> dict:
    return {
        "node_id": n.node_id,
        "role": n.role.value,
        "logical_cores": n.logical_cores,
        "reserved_cores": format_cpuset(n.reserved_cores),
        "isolated_cores": format_cpuset(n.isolated_cores),
        "hugepages": {"page_size_bytes": n.hugepages.page_size_bytes, "count": n.hugepages.count},
        "nics": [{"name": x.name, "mode": x.mode.value, "link_gbps": x.link_gbps} for x in n.nics],
        "realtime_kernel": n.realtime_kernel,
        "power_hint": n.power_hint.value,
    }


def band_to_dict(b: SpectrumBand) -> dict:
    return {
        "band_id": b.band_id,
        "freq_lo_hz": b.freq_lo_hz,
        "freq_hi_hz": b.freq_hi_hz,
        "max_prb": b.max_prb,
        "duplex": b.duplex.value,
    }


# -- loading ----------------------------------------------------------------


def _node_from_dict(d: dict) -> NodeProfile:
    hp = d.get("hugepages") or {}
    page = parse_size(hp.get("page_size_bytes", hp.get("page_size", GiB)))
    return NodeProfile(
        node_id=str(d["node_id"]),
        role=NodeRole(d["role"]),
        logical_cores=int(d["logical_cores"]),
        reserved_cores=parse_cpuset(d.get("reserved_cores", "")),
        isolated_cores=parse_cpuset(d.get("isolated_cores", "")),
        hugepages=Hugepages(page, int(hp.get("count", 0))),
        nics=tuple(Nic(n["name"], NicMode(n["mode"]), float(n["link_gbps"])) for n in d.get("nics", [])),
        realtime_kernel=bool(d.get("realtime_kernel", False)),
        power_hint=PowerHint(d.get("power_hint", "DEFAULT")),
    )


def _band_from_dict(d: dict) -> SpectrumBand:
    return SpectrumBand(
        band_id=str(d["band_id"]),
        freq_lo_hz=float(d["freq_lo_hz"]),
        freq_hi_hz=float(d["freq_hi_hz"]),
        max_prb=int(d["max_prb"]),
        duplex=Duplex(d["duplex"]),
    )


def _radio_from_dict(d: dict) -> RadioDevice:
    return RadioDevice(
        radio_id=str(d["radio_id"]),
        model=str(d["model"]),
        bands=frozenset(str(b) for b in d.get("bands", [])),
        attached_node=str(d["attached_node"]),
        link=str(d.get("link", "")),
        state=RadioState(d.get("state", "AVAILABLE")),
    )


def load_inventory_document(doc: dict) -> tuple[list[NodeProfile], list[RadioDevice], list[SpectrumBand]]:
    if not isinstance(doc, dict):
        raise ConfigInvalid("inventory document must be a mapping")
    version = doc.get("version")
    if version != INVENTORY_VERSION:
        raise ConfigInvalid(f"unsupported inventory version {version!r}")
    try:
        nodes = [_node_from_dict(n) for n in doc.get("nodes", [])]
        radios = [_radio_from_dict(r) for r in doc.get("radios", [])]
        bands = [_band_from_dict(b) for b in doc.get("bands", [])]
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigInvalid(f"malformed inventory: {exc}") from exc
    node_ids = {n.node_id for n in nodes}
    if len(node_ids) != len(nodes):
        raise ConfigInvalid("duplicate node_id in inventory")
    if len({r.radio_id for r in radios}) != len(radios):
        raise ConfigInvalid("duplicate radio_id in inventory")
    for r in radios:
        if r.attached_node not in node_ids:
            raise ConfigInvalid(f"radio {r.radio_id} attached to unknown node {r.attached_node}")
        if r.state is RadioState.CLAIMED:
            raise ConfigInvalid(f"radio {r.radio_id}: CLAIMED is runtime state, not inventory")
    return nodes, radios, bands


@functools.lru_cache(maxsize=1)
def _default_inventory_text() -> str:
    return resources.files("ranforge").joinpath("data/default_inventory.yaml").read_text()


@functools.lru_cache(maxsize=1)
def _default_inventory_parsed() -> dict:
    return yaml.safe_load(_default_inventory_text())


def default_inventory_document() -> dict:
    return copy.deepcopy(_default_inventory_parsed())


@functools.lru_cache(maxsize=1)
def _default_parts() -> tuple[list[NodeProfile], list[RadioDevice], list[SpectrumBand]]:
    return load_inventory_document(default_inventory_document())


def default_band_catalog() -> dict[str, SpectrumBand]:
    _, _, bands = load_inventory_document(default_inventory_document())
    return {b.band_id: b for b in bands}


# -- the inventory authority -----------------------------------------------


class Inventory:
    def __init__(
        self,
        nodes: Iterable[NodeProfile],
        radios: Iterable[RadioDevice],
        bands: Iterable[SpectrumBand],
        state_path: str | os.PathLike | None = None,
        clock=None,
    ):
        self.nodes: dict[str, NodeProfile] = {n.node_id: n for n in nodes}
        self._radios: dict[str, RadioDevice] = {r.radio_id: r for r in radios}
        self.bands: dict[str, SpectrumBand] = {b.band_id: b for b in bands}
        self._placements: dict[str, Placement] = {}
        self._deployments: dict[str, DeploymentRecord] = {}
        self._next_placement = 1
        self._next_deployment = 1
        self._lock = threading.RLock()
        self._clock = clock or SystemClock()
        self.state_path = Path(state_path) if state_path else None
        if self.state_path and self.state_path.exists():
            self._load_state()

    @classmethod
    def from_document(cls, doc: dict, **kw) -> "Inventory":
        nodes, radios, bands = load_inventory_document(doc)
        return cls(nodes, radios, bands, **kw)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kw) -> "Inventory":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read inventory {path}: {exc}") from exc
        return cls.from_document(doc, **kw)

    @classmethod
    def default(cls, **kw) -> "Inventory":
        # the parsed parts are frozen, so every default inventory can share them
        return cls(*_default_parts(), **kw)

    # -- persistence

    def _load_state(self) -> None:
        state = json.loads(self.state_path.read_text())
        for p in state.get("placements", []):
            pl = Placement.from_dict(p)
            self._placements[pl.placement_id] = pl
        for d in state.get("deployments", []):
            rec = DeploymentRecord.from_dict(d)
            self._deployments[rec.deployment_id] = rec
        for rid, st in state.get("radio_states", {}).items():
            if rid in self._radios:
                self._radios[rid] = replace(self._radios[rid], state=RadioState(st))
        self._next_placement = int(state.get("next_placement", 1))
        self._next_deployment = int(state.get("next_deployment", 1))

    def _save_state(self) -> None:
        if not self.state_path:
            return
        state = {
            "version": INVENTORY_VERSION,
            "next_placement": self._next_placement,
            "next_deployment": self._next_deployment,
            "placements": [p.to_dict() for p in self._placements.values()],
            "deployments": [d.to_dict() for d in self._deployments.values()],
            "radio_states": {
                r.radio_id: r.state.value for r in self._radios.values() if r.state is RadioState.OFFLINE
            },
        }
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state, indent=1, sort_keys=True))
        os.replace(tmp, self.state_path)

    # -- views

    def _claimed_radio_ids(self) -> set[str]:
        return {rid for p in self._placements.values() if p.state is PlacementState.ACTIVE for rid in p.radio_ids}

    def _radio_view(self, r: RadioDevice, claimed: set[str]) -> RadioDevice:
        if r.state is not RadioState.OFFLINE and r.radio_id in claimed:
            return replace(r, state=RadioState.CLAIMED)
        return r

    def radios(self) -> list[RadioDevice]:
        with self._lock:
            claimed = self._claimed_radio_ids()
            return [self._radio_view(r, claimed) for _, r in sorted(self._radios.items())]

    def radio(self, radio_id: str) -> RadioDevice:
        with self._lock:
            return self._radio_view(self._radios[radio_id], self._claimed_radio_ids())

    def placements(self, active_only: bool = False) -> list[Placement]:
        with self._lock:
            out = sorted(self._placements.values(), key=lambda p: p.placement_id)
        return [p for p in out if p.state is PlacementState.ACTIVE] if active_only else out

    def placement(self, placement_id: str) -> Placement:
        with self._lock:
            try:
                return self._placements[placement_id]
            except KeyError:
                raise PlacementNotFound(f"no placement {placement_id}") from None

    def discover_radios(self, band_filter: Optional[str] = None) -> list[RadioDevice]:
        """AVAILABLE radios, optionally restricted to those supporting ``band_filter``."""
        return [
            r
            for r in self.radios()
            if r.state is RadioState.AVAILABLE and (band_filter is None or band_filter in r.bands)
        ]

    def set_radio_state(self, radio_id: str, state: RadioState) -> RadioDevice:
        # going OFFLINE does not release any placement holding the radio
        if state is RadioState.CLAIMED:
            raise ValueError("CLAIMED is derived from placements")
        with self._lock:
            self._radios[radio_id] = replace(self._radios[radio_id], state=state)
            self._save_state()
            return self.radio(radio_id)

    def _free_cores(self, node: NodeProfile) -> list[int]:
        used = {
            c
            for p in self._placements.values()
            if p.state is PlacementState.ACTIVE and p.node_id == node.node_id
            for c in p.cores
        }
        return sorted(node.isolated_cores - used)

    def _free_pages(self, node: NodeProfile) -> int:
        used = sum(
            p.hugepage_pages
            for p in self._placements.values()
            if p.state is PlacementState.ACTIVE and p.node_id == node.node_id
        )
        return node.hugepages.count - used

    def _used_prbs(self, band_id: str) -> int:
        return sum(
            p.prbs for p in self._placements.values() if p.state is PlacementState.ACTIVE and p.band_id == band_id
        )

    def capacity(self) -> dict[str, Any]:
        """Snapshot of free capacity per node, band, and the set of claimable radios."""
        with self._lock:
            return {
                "nodes": {
                    nid: {"free_isolated_cores": len(self._free_cores(n)), "free_hugepages": self._free_pages(n)}
                    for nid, n in sorted(self.nodes.items())
                },
                "bands": {bid: b.max_prb - self._used_prbs(bid) for bid, b in sorted(self.bands.items())},
                "available_radios": sorted(r.radio_id for r in self.discover_radios()),
            }

    # -- allocation

    def match(self, claim: ResourceClaim) -> Placement:
        """Atomically find and allocate a node (plus radios and PRBs) for ``claim``."""
        with self._lock:
            band = None
            if claim.band_id is not None:
                band = self.bands.get(claim.band_id)
                if band is None:
                    raise UnsupportedBand(f"band {claim.band_id} not in spectrum catalog")
                free_prb = band.max_prb - self._used_prbs(band.band_id)
                if claim.prbs_needed > free_prb:
                    raise BandExhausted(
                        f"band {band.band_id}: {claim.prbs_needed} PRB requested, {free_prb} free",
                        detail={"band_id": band.band_id, "needed": claim.prbs_needed, "free": free_prb},
                    )

            claimed = self._claimed_radio_ids()
            feasible = []
            shortfall: dict[str, dict] = {}
            for node in sorted(self.nodes.values(), key=lambda n: n.node_id):
                if claim.latency_class is LatencyClass.LOW_LATENCY and node.role is not NodeRole.WORKER_RT:
                    shortfall[node.node_id] = {"latency_class": {"needed": claim.latency_class.value,
                                                                 "available": node.role.value}}
                    continue
                free_cores = self._free_cores(node)
                free_pages = self._free_pages(node)
                page = node.hugepages.page_size_bytes
                pages_needed = math.ceil(claim.hugepage_bytes_needed / page) if claim.hugepage_bytes_needed else 0
                radios = sorted(
                    r.radio_id
                    for r in self._radios.values()
                    if r.attached_node == node.node_id
                    and r.state is RadioState.AVAILABLE
                    and r.radio_id not in claimed
                    and claim.band_id in r.bands
                ) if claim.radios_needed else []
                short = {}
                if len(free_cores) < claim.isolated_cores_needed:
                    short["isolated_cores"] = {"needed": claim.isolated_cores_needed, "available": len(free_cores)}
                if free_pages < pages_needed:
                    short["hugepage_bytes"] = {
                        "needed": claim.hugepage_bytes_needed,
                        "available": free_pages * page,
                    }
                if len(radios) < claim.radios_needed:
                    short["radios"] = {"needed": claim.radios_needed, "available": len(radios)}
                if short:
                    shortfall[node.node_id] = short
                else:
                    feasible.append((node, free_cores, pages_needed, radios))
            if not feasible:
                raise NoFeasibleNode("no node satisfies the claim", detail=shortfall)

            feasible.sort(key=lambda f: (-len(f[1]), f[0].node_id))
            node, free_cores, pages_needed, radios = feasible[0]
            pid = f"pl-{self._next_placement:04d}"
            self._next_placement += 1
            placement = Placement(
                placement_id=pid,
                node_id=node.node_id,
                cores=frozenset(free_cores[: claim.isolated_cores_needed]),
                hugepage_pages=pages_needed,
                hugepage_bytes=pages_needed * node.hugepages.page_size_bytes,
                radio_ids=tuple(radios[: claim.radios_needed]),
                band_id=claim.band_id,
                prbs=claim.prbs_needed,
            )
            self._placements[pid] = placement
            self._save_state()
            return placement

    def release(self, placement_id: str) -> Placement:
        with self._lock:
            p = self.placement(placement_id)
            if p.state is not PlacementState.ACTIVE:
                raise NotActive(f"placement {placement_id} is {p.state.value}")
            p = replace(p, state=PlacementState.RELEASED)
            self._placements[placement_id] = p
            self._save_state()
            return p

    # -- deployment

    def deploy(self, plan, artifact: Optional["ImageArtifact"], placement_id: Optional[str]) -> DeploymentRecord:
        """Instantiate one workload per manifest replica, GNB bound to the placement's radio."""
        with self._lock:
            if placement_id is None or placement_id not in self._placements:
                raise PlacementMissing(f"placement {placement_id} does not exist")
            placement = self._placements[placement_id]
            if placement.state is not PlacementState.ACTIVE:
                raise PlacementMissing(f"placement {placement_id} is {placement.state.value}")
            if artifact is None:
                raise ArtifactMissing("no image artifact to deploy")

            general_nodes = sorted(n.node_id for n in self.nodes.values() if n.role is NodeRole.CONTROL_PLANE)
            instances: list[WorkloadInstance] = []
            rr = 0
            for decl in plan.manifest:
                for i in range(decl.replicas):
                    iid = f"{decl.role.value.lower().replace('_', '-')}-{i}"
                    if decl.role is WorkloadRole.GNB:
                        radio = placement.radio_ids[i] if i < len(placement.radio_ids) else None
                        instances.append(WorkloadInstance(iid, decl.role, placement.node_id, radio))
                    elif decl.latency_class is LatencyClass.LOW_LATENCY or not general_nodes:
                        instances.append(WorkloadInstance(iid, decl.role, placement.node_id))
                    else:
                        instances.append(WorkloadInstance(iid, decl.role, general_nodes[rr % len(general_nodes)]))
                        rr += 1
            did = f"dep-{self._next_deployment:04d}"
            self._next_deployment += 1
            record = DeploymentRecord(
                deployment_id=did,
                plan_id=plan.plan_id,
                placement_id=placement_id,
                image_name=artifact.image_name,
                image_tag=artifact.tag_name,
                image_digest=artifact.digest,
                instances=instances,
                created_at=isoformat(self._clock.now()),
            )
            self._deployments[did] = record
            self._save_state()
            return record

    def deployment(self, deployment_id: str) -> DeploymentRecord:
        with self._lock:
            try:
                return self._deployments[deployment_id]
            except KeyError:
                raise DeploymentNotFound(f"no deployment {deployment_id}") from None

    def deployments(self) -> list[DeploymentRecord]:
        with self._lock:
            return sorted(self._deployments.values(), key=lambda d: d.deployment_id)

    def retire(self, deployment_id: str) -> DeploymentRecord:
        """Mark a deployment inactive and release its placement; repeat calls are no-ops."""
        with self._lock:
            rec = self.deployment(deployment_id)
            if rec.active:
                rec.active = False
                p = self._placements.get(rec.placement_id)
                if p is not None and p.state is PlacementState.ACTIVE:
                    self._placements[p.placement_id] = replace(p, state=PlacementState.RELEASED)
                self._save_state()
            return rec
