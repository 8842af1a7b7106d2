"""Per-configuration baselines and PASS/FAIL/INCONCLUSIVE judging.

For every phase the band is ``[m - k*s - eps, m + k*s + eps]`` where ``m`` and
``s`` are the mean and sample standard deviation (n-1 denominator) of the
history's run-level phase means. A run passes when, in every phase, its mean
lies in the band and at least ``theta`` of its samples do too. ``eps`` keeps a
zero-variance history from rejecting every nonzero deviation.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Optional

from .airtest import TestStatus
from .clock import isoformat, parse_ts, utcnow
from .errors import ConfigMismatch, EmptyHistory, InvalidInput, MixedConfig

if TYPE_CHECKING:
    from .vault import RunRecord, Vault

DEFAULT_K = 2.0
DEFAULT_THETA = 0.9
DEFAULT_EPSILON = 0.5
DEFAULT_MIN_HISTORY = 5


class BaselineStatus(str, Enum):
    READY = "READY"
    PROVISIONAL = "PROVISIONAL"


class Outcome(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class PhaseBaseline:
    target_rate_mbps: float
    history_mean_mbps: Optional[float]
    history_std_mbps: Optional[float]
    run_count: int

    def to_dict(self) -> dict:
        return {
            "target_rate_mbps": self.target_rate_mbps,
            "history_mean_mbps": self.history_mean_mbps,
            "history_std_mbps": self.history_std_mbps,
            "run_count": self.run_count,
        }


@dataclass(frozen=True)
class Baseline:
    config_key: str
    phases: tuple[PhaseBaseline, ...]
    k: float
    built_from: tuple[str, ...]
    built_at: str
    min_history: int
    status: BaselineStatus

    @property
    def provisional(self) -> bool:
        return self.status is BaselineStatus.PROVISIONAL

    def to_dict(self) -> dict:
        return {
            "config_key": self.config_key,
            "status": self.status.value,
            "k": self.k,
            "min_history": self.min_history,
            "run_count": len(self.built_from),
            "built_from": list(self.built_from),
            "built_at": self.built_at,
            "phases": [p.to_dict() for p in self.phases],
        }


def build_baseline(
    config_key: str,
    history: Iterable["RunRecord"],
    k: float = DEFAULT_K,
    min_history: int = DEFAULT_MIN_HISTORY,
    built_at: Optional[str] = None,
) -> Baseline:
    history = list(history)
    if not history:
        raise EmptyHistory(f"no history for {config_key}")
    if k <= 0:
        raise InvalidInput(f"band width factor k must be positive, got {k}")
    for rec in history:
        if rec.config_key != config_key:
            raise MixedConfig(f"run {rec.run_id} belongs to {rec.config_key}, not {config_key}")
        if rec.status is not TestStatus.COMPLETED:
            raise InvalidInput(f"run {rec.run_id} is {rec.status.value}; baselines use COMPLETED runs only")
    phases = []
    for i, head in enumerate(history[0].phases):
        means = [r.phases[i].mean for r in history if r.phases[i].sample_count > 0]
        std = statistics.stdev(means) if len(means) > 1 else (0.0 if means else None)
        phases.append(PhaseBaseline(head.target_rate_mbps, statistics.fmean(means) if means else None, std, len(means)))
    status = BaselineStatus.READY if len(history) >= min_history else BaselineStatus.PROVISIONAL
    return Baseline(
        config_key,
        tuple(phases),
        float(k),
        tuple(r.run_id for r in history),
        built_at or isoformat(utcnow()),
        min_history,
        status,
    )


def empty_baseline(config_key: str, targets: Iterable[float], k: float = DEFAULT_K,
                   min_history: int = DEFAULT_MIN_HISTORY, built_at: Optional[str] = None) -> Baseline:
    """PROVISIONAL stand-in for a configuration with no usable history yet."""
    phases = tuple(PhaseBaseline(t, None, None, 0) for t in targets)
    return Baseline(config_key, phases, float(k), (), built_at or isoformat(utcnow()), min_history,
                    BaselineStatus.PROVISIONAL)


@dataclass(frozen=True)
class PhaseDetail:
    phase_index: int
    target_rate_mbps: float
    sample_count: int
    phase_mean: Optional[float]
    band_lo: Optional[float]
    band_hi: Optional[float]
    in_band_fraction: Optional[float]
    mean_in_band: Optional[bool]
    phase_ok: Optional[bool]

    def to_dict(self) -> dict:
        return {
            "phase_index": self.phase_index,
            "target_rate_mbps": self.target_rate_mbps,
            "sample_count": self.sample_count,
            "phase_mean": self.phase_mean,
            "band_lo": self.band_lo,
            "band_hi": self.band_hi,
            "in_band_fraction": self.in_band_fraction,
            "mean_in_band": self.mean_in_band,
            "phase_ok": self.phase_ok,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseDetail":
        return cls(**d)


@dataclass(frozen=True)
class Verdict:
    run_id: str
    config_key: str
    outcome: Outcome
    phases: tuple[PhaseDetail, ...]
    reason: str
    k: float
    theta: float
    epsilon: float
    baseline_status: BaselineStatus
    built_from: tuple[str, ...] = ()

    def phase_outcomes(self) -> list[Optional[bool]]:
        return [p.phase_ok for p in self.phases]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_key": self.config_key,
            "outcome": self.outcome.value,
            "reason": self.reason,
            "k": self.k,
            "theta": self.theta,
            "epsilon": self.epsilon,
            "baseline_status": self.baseline_status.value,
            "built_from": list(self.built_from),
            "phases": [p.to_dict() for p in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(
            run_id=d["run_id"],
            config_key=d["config_key"],
            outcome=Outcome(d["outcome"]),
            phases=tuple(PhaseDetail.from_dict(p) for p in d["phases"]),
            reason=d["reason"],
            k=d["k"],
            theta=d["theta"],
            epsilon=d["epsilon"],
            baseline_status=BaselineStatus(d["baseline_status"]),
            built_from=tuple(d.get("built_from", ())),
        )


def band(pb: PhaseBaseline, k: float, epsilon: float) -> Optional[tuple[float, float]]:
    if pb.history_mean_mbps is None:
        return None
    half = k * pb.history_std_mbps + epsilon
    return pb.history_mean_mbps - half, pb.history_mean_mbps + half


def outcome_from_detail(phases: Iterable[PhaseDetail]) -> Outcome:
    """Recompute PASS/FAIL from stored detail (INCONCLUSIVE gating happens before)."""
    return Outcome.PASS if all(p.phase_ok for p in phases) else Outcome.FAIL


def judge(
    run: "RunRecord",
    baseline: Baseline,
    k: Optional[float] = None,
    theta: float = DEFAULT_THETA,
    epsilon: float = DEFAULT_EPSILON,
) -> Verdict:
    """Classify ``run`` against ``baseline``. Pure: depends only on its arguments."""
    if run.config_key != baseline.config_key:
        raise ConfigMismatch(f"run {run.run_id} is {run.config_key}, baseline is {baseline.config_key}")
    k = baseline.k if k is None else float(k)
    if k <= 0:
        raise InvalidInput(f"band width factor k must be positive, got {k}")
    if not 0.0 <= theta <= 1.0:
        raise InvalidInput(f"coverage threshold theta must be in [0, 1], got {theta}")
    if epsilon < 0:
        raise InvalidInput(f"variance floor epsilon must be non-negative, got {epsilon}")
    if len(run.phases) != len(baseline.phases):
        raise ConfigMismatch(f"run {run.run_id} has {len(run.phases)} phases, baseline {len(baseline.phases)}")

    details = []
    for i, (summary, pb) in enumerate(zip(run.phases, baseline.phases)):
        b = band(pb, k, epsilon)
        vals = run.series.throughput(i) if run.series is not None else []
        if b is None or summary.sample_count == 0:
            details.append(PhaseDetail(i, summary.target_rate_mbps, summary.sample_count, summary.mean,
                                       b[0] if b else None, b[1] if b else None, None, None, None))
            continue
        lo, hi = b
        inside = sum(1 for x in vals if lo <= x <= hi)
        frac = inside / len(vals) if vals else 0.0
        mean_ok = lo <= summary.mean <= hi
        details.append(PhaseDetail(i, summary.target_rate_mbps, summary.sample_count, summary.mean,
                                   lo, hi, frac, mean_ok, mean_ok and frac >= theta))
    details = tuple(details)

    if run.status is not TestStatus.COMPLETED:
        outcome, reason = Outcome.INCONCLUSIVE, f"run {run.status.value}: {run.abort_reason or 'no reason recorded'}"
    elif baseline.provisional:
        outcome = Outcome.INCONCLUSIVE
        reason = f"baseline PROVISIONAL: {len(baseline.built_from)} of {baseline.min_history} runs of history"
    else:
        outcome = outcome_from_detail(details)
        failed = [f"{d.target_rate_mbps:g} Mbps" for d in details if not d.phase_ok]
        reason = "all phases within baseline band" if not failed else "outside baseline band: " + ", ".join(failed)
    return Verdict(run.run_id, run.config_key, outcome, details, reason, k, float(theta), float(epsilon),
                   baseline.status, baseline.built_from)


def select_history(
    vault: "Vault",
    config_key: str,
    before: Optional[str] = None,
    exclude_run_id: Optional[str] = None,
    include_quarantined: bool = False,
    limit: Optional[int] = None,
) -> list["RunRecord"]:
    """COMPLETED runs of ``config_key`` started before ``before``; FAIL-judged runs are quarantined."""
    cutoff = parse_ts(before) if before is not None else None
    out = []
    for rec in vault.query(config_key):
        if rec.run_id == exclude_run_id or (cutoff is not None and parse_ts(rec.started_at) >= cutoff):
            continue
        if not include_quarantined and rec.verdict and rec.verdict.get("outcome") == Outcome.FAIL.value:
            continue
        out.append(rec)
        if limit is not None and len(out) >= limit:
            break
    return out


def baseline_for(
    vault: "Vault",
    config_key: str,
    targets: Iterable[float] = (),
    before: Optional[str] = None,
    exclude_run_id: Optional[str] = None,
    k: float = DEFAULT_K,
    min_history: int = DEFAULT_MIN_HISTORY,
    include_quarantined: bool = False,
    built_at: Optional[str] = None,
) -> Baseline:
    history = select_history(vault, config_key, before, exclude_run_id, include_quarantined)
    if not history:
        return empty_baseline(config_key, targets, k, min_history, built_at)
    return build_baseline(config_key, history, k, min_history, built_at)


def judge_run(
    vault: "Vault",
    run_id: str,
    k: float = DEFAULT_K,
    theta: float = DEFAULT_THETA,
    epsilon: float = DEFAULT_EPSILON,
    min_history: int = DEFAULT_MIN_HISTORY,
    include_quarantined: bool = False,
    record: bool = True,
) -> Verdict:
    """Judge a stored run against the history that preceded it and optionally attach the verdict."""
    rec = vault.get(run_id)
    baseline = baseline_for(vault, rec.config_key, rec.targets, before=rec.started_at, exclude_run_id=run_id,
                            k=k, min_history=min_history, include_quarantined=include_quarantined,
                            built_at=rec.started_at)
    verdict = judge(rec, baseline, k, theta, epsilon)
    if record:
        record_verdict(vault, verdict)
    return verdict


def record_verdict(vault: "Vault", verdict: Verdict) -> "RunRecord":
    return vault.attach_verdict(verdict.run_id, verdict.to_dict())
