"""Durable store for test runs, verdicts and pipeline event logs.

On-disk layout (version 1)::

    <root>/VERSION                              "1"
    <root>/journal/<run_id>.json                write-ahead intent, removed once applied
    <root>/configs/<slug>/config_key            the configuration key in clear text
    <root>/configs/<slug>/records.jsonl         one RunRecord per line, append-only
    <root>/configs/<slug>/series/<run_id>.csv   KPI samples (t_s,phase,throughput_mbps,loss_frac)
    <root>/configs/<slug>/verdicts/<run_id>.json
    <root>/events/<run_id>.jsonl                pipeline run event logs

A record line is appended only after its series file is durable, and readers
ignore a trailing line without its newline, so a query never sees half a run.
Box statistics use linear interpolation between closest ranks (numpy's
default ``linear`` percentile method): the q-quantile of sorted x[0..n-1] is
x[floor(h)] + (h - floor(h)) * (x[floor(h)+1] - x[floor(h)]) with h = q(n-1).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import statistics
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .airtest import KpiSeries, TestRun, TestStatus
from .clock import parse_ts
from .errors import CorruptRecord, NoData, RunNotFound, StorageFailure, VerdictAlreadyRecorded

VAULT_VERSION = "1"


def _fmt_rate(x: float) -> str:
    return f"{x:g}"


def config_key(image_name: str, band_id: str, prb_count: int, targets: Iterable[float]) -> str:
    """Canonical configuration key: image repository, band, PRBs and phase targets."""
    return f"{image_name}|{band_id}|{int(prb_count)}prb|{','.join(_fmt_rate(t) for t in targets)}"


def config_slug(key: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", key).strip("_")[:64]
    return f"{safe}-{hashlib.sha256(key.encode()).hexdigest()[:8]}"


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    _fsync_dir(path.parent)


@dataclass(frozen=True)
class PhaseSummary:
    target_rate_mbps: float
    sample_count: int
    mean: Optional[float] = None
    std: Optional[float] = None
    min: Optional[float] = None
    max: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "target_rate_mbps": self.target_rate_mbps,
            "sample_count": self.sample_count,
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSummary":
        return cls(d["target_rate_mbps"], d["sample_count"], d["mean"], d["std"], d["min"], d["max"])


def summarize(series: KpiSeries, targets: Iterable[float]) -> tuple[PhaseSummary, ...]:
    out = []
    for i, target in enumerate(targets):
        vals = series.throughput(i)
        if not vals:
            out.append(PhaseSummary(target, 0))
            continue
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(PhaseSummary(target, len(vals), statistics.fmean(vals), std, min(vals), max(vals)))
    return tuple(out)


@dataclass
class RunRecord:
    run_id: str
    config_key: str
    date: str
    started_at: str
    status: TestStatus
    plan_id: str
    deployment_id: str
    image_name: str
    image_tag: str
    band_id: str
    prb_count: int
    phases: tuple[PhaseSummary, ...]
    series_ref: str
    abort_reason: Optional[str] = None
    verdict: Optional[dict] = None
    series: Optional[KpiSeries] = field(default=None, compare=False, repr=False)

    @property
    def targets(self) -> tuple[float, ...]:
        return tuple(p.target_rate_mbps for p in self.phases)

    def stored_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_key": self.config_key,
            "date": self.date,
            "started_at": self.started_at,
            "status": self.status.value,
            "plan_id": self.plan_id,
            "deployment_id": self.deployment_id,
            "image_name": self.image_name,
            "image_tag": self.image_tag,
            "band_id": self.band_id,
            "prb_count": self.prb_count,
            "phases": [p.to_dict() for p in self.phases],
            "series_ref": self.series_ref,
            "abort_reason": self.abort_reason,
        }

    def to_dict(self) -> dict:
        d = self.stored_dict()
        d["verdict"] = self.verdict
        return d

    @classmethod
    def from_stored(cls, d: dict) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            config_key=d["config_key"],
            date=d["date"],
            started_at=d["started_at"],
            status=TestStatus(d["status"]),
            plan_id=d["plan_id"],
            deployment_id=d["deployment_id"],
            image_name=d["image_name"],
            image_tag=d["image_tag"],
            band_id=d["band_id"],
            prb_count=int(d["prb_count"]),
            phases=tuple(PhaseSummary.from_dict(p) for p in d["phases"]),
            series_ref=d["series_ref"],
            abort_reason=d.get("abort_reason"),
        )


@dataclass(frozen=True)
class DailyAggregate:
    date: str
    config_key: str
    phase_index: int
    target_rate_mbps: float
    run_count: int
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "date": self.date,
            "config_key": self.config_key,
            "phase_index": self.phase_index,
            "target_rate_mbps": self.target_rate_mbps,
            "run_count": self.run_count,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "whisker_lo": self.whisker_lo,
            "whisker_hi": self.whisker_hi,
            "outliers": list(self.outliers),
        }


def box_stats(values: Iterable[float]) -> dict:
    """Quartiles plus Tukey whiskers: the most extreme values within 1.5 IQR of the box."""
    x = np.sort(np.asarray(list(values), dtype=float))
    if x.size == 0:
        raise ValueError("box_stats of empty data")
    q1, median, q3 = (float(v) for v in np.percentile(x, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    # when every point past a quartile is an outlier the whisker collapses onto the box edge
    return {
        "median": median,
        "q1": q1,
        "q3": q3,
        "whisker_lo": min(float(inside.min()), q1),
        "whisker_hi": max(float(inside.max()), q3),
        "outliers": tuple(float(v) for v in x[(x < lo_fence) | (x > hi_fence)]),
    }


class Vault:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._lock = threading.RLock()
        self._run_locks: dict[str, threading.Lock] = {}
        self._index: dict[str, str] = {}
        try:
            for sub in ("journal", "configs", "events"):
                (self.root / sub).mkdir(parents=True, exist_ok=True)
            version_file = self.root / "VERSION"
            if version_file.exists():
                found = version_file.read_text().strip()
                if found != VAULT_VERSION:
                    raise StorageFailure(f"vault layout version {found} unsupported (want {VAULT_VERSION})")
            else:
                _atomic_write(version_file, VAULT_VERSION.encode())
        except OSError as exc:
            raise StorageFailure(f"cannot open vault at {self.root}: {exc}") from exc
        self._recover()

    @property
    def events_dir(self) -> Path:
        return self.root / "events"

    # -- recovery / index

    def _records_path(self, slug: str) -> Path:
        return self.root / "configs" / slug / "records.jsonl"

    def _read_lines(self, slug: str) -> list[dict]:
        path = self._records_path(slug)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return []
        out = []
        for line in data.split(b"\n")[:-1]:  # last element is "" or a torn tail
            if line.strip():
                out.append(json.loads(line))
        return out

    def _truncate_torn_tail(self, path: Path) -> None:
        data = path.read_bytes()
        if data and not data.endswith(b"\n"):
            keep = data.rfind(b"\n") + 1
            with open(path, "r+b") as f:
                f.truncate(keep)
                f.flush()
                os.fsync(f.fileno())

    def _recover(self) -> None:
        with self._lock:
            for cfg in (self.root / "configs").iterdir():
                rec = cfg / "records.jsonl"
                if rec.exists():
                    self._truncate_torn_tail(rec)
            self._rebuild_index()
            for intent in sorted((self.root / "journal").glob("*.json")):
                try:
                    entry = json.loads(intent.read_text())
                except ValueError:
                    intent.unlink()  # torn intent: the ingest was never acknowledged
                    continue
                if entry["record"]["run_id"] not in self._index:
                    self._apply(entry["slug"], entry["config_key"], entry["record"], entry["csv"])
                intent.unlink()
            _fsync_dir(self.root / "journal")

    def _rebuild_index(self) -> None:
        self._index = {}
        for cfg in (self.root / "configs").iterdir():
            for d in self._read_lines(cfg.name):
                self._index[d["run_id"]] = cfg.name

    def _run_lock(self, run_id: str) -> threading.Lock:
        with self._lock:
            return self._run_locks.setdefault(run_id, threading.Lock())

    # -- writes

    def _apply(self, slug: str, key: str, stored: dict, csv_text: str) -> None:
        cfg = self.root / "configs" / slug
        (cfg / "series").mkdir(parents=True, exist_ok=True)
        (cfg / "verdicts").mkdir(parents=True, exist_ok=True)
        key_file = cfg / "config_key"
        if not key_file.exists():
            _atomic_write(key_file, key.encode())
        _atomic_write(cfg / stored["series_ref"], csv_text.encode())
        line = (json.dumps(stored, sort_keys=True) + "\n").encode()
        with open(self._records_path(slug), "ab") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())
        self._index[stored["run_id"]] = slug

    def ingest(self, run: TestRun) -> RunRecord:
        """Persist ``run``; returns only once durable. Re-ingesting a run_id is a no-op."""
        with self._run_lock(run.run_id):
            with self._lock:
                if run.run_id in self._index or self._refresh_has(run.run_id):
                    return self.get(run.run_id)
            key = config_key(run.image_name, run.band_id, run.prb_count, [p.target_rate_mbps for p in run.phases])
            slug = config_slug(key)
            record = RunRecord(
                run_id=run.run_id,
                config_key=key,
                date=parse_ts(run.started_at).date().isoformat(),
                started_at=run.started_at,
                status=run.status,
                plan_id=run.plan_id,
                deployment_id=run.deployment_id,
                image_name=run.image_name,
                image_tag=run.image_tag,
                band_id=run.band_id,
                prb_count=run.prb_count,
                phases=summarize(run.series, [p.target_rate_mbps for p in run.phases]),
                series_ref=f"series/{run.run_id}.csv",
                abort_reason=run.abort_reason,
            )
            stored = record.stored_dict()
            csv_text = run.series.to_csv()
            intent = self.root / "journal" / f"{run.run_id}.json"
            try:
                _atomic_write(intent, json.dumps(
                    {"slug": slug, "config_key": key, "record": stored, "csv": csv_text}).encode())
                with self._lock:
                    self._apply(slug, key, stored, csv_text)
                intent.unlink()
            except OSError as exc:
                raise StorageFailure(f"ingest of {run.run_id} failed: {exc}") from exc
            return self.get(run.run_id)

    def _refresh_has(self, run_id: str) -> bool:
        # another process may have written since this instance built its index
        self._rebuild_index()
        return run_id in self._index

    def attach_verdict(self, run_id: str, verdict: dict) -> RunRecord:
        """Attach ``verdict`` once; an identical repeat is a no-op, a different one is rejected."""
        with self._run_lock(run_id):
            rec = self.get(run_id)
            path = self.root / "configs" / self._index[run_id] / "verdicts" / f"{run_id}.json"
            data = json.dumps(verdict, sort_keys=True).encode()
            if path.exists():
                if json.loads(path.read_bytes()) == json.loads(data):
                    return rec
                raise VerdictAlreadyRecorded(f"run {run_id} already has a different verdict")
            _atomic_write(path, data)
            return self.get(run_id)

    # -- reads

    def _load(self, slug: str, stored: dict, verify: bool = True) -> RunRecord:
        rec = RunRecord.from_stored(stored)
        cfg = self.root / "configs" / slug
        try:
            rec.series = KpiSeries.from_csv((cfg / rec.series_ref).read_text())
        except (OSError, ValueError) as exc:
            raise CorruptRecord(f"series of run {rec.run_id} unreadable: {exc}") from exc
        if verify and summarize(rec.series, rec.targets) != rec.phases:
            raise CorruptRecord(f"summary of run {rec.run_id} does not match its stored series")
        vpath = cfg / "verdicts" / f"{rec.run_id}.json"
        if vpath.exists():
            rec.verdict = json.loads(vpath.read_text())
        return rec

    def get(self, run_id: str) -> RunRecord:
        with self._lock:
            slug = self._index.get(run_id)
            if slug is None and self._refresh_has(run_id):
                slug = self._index[run_id]
        if slug is None:
            raise RunNotFound(f"no run {run_id} in vault")
        for d in self._read_lines(slug):
            if d["run_id"] == run_id:
                return self._load(slug, d)
        raise RunNotFound(f"no run {run_id} in vault")  # pragma: no cover

    def has(self, run_id: str) -> bool:
        with self._lock:
            return run_id in self._index or self._refresh_has(run_id)

    def series_csv(self, run_id: str) -> str:
        rec = self.get(run_id)
        return (self.root / "configs" / config_slug(rec.config_key) / rec.series_ref).read_text()

    def configs(self) -> list[str]:
        out = []
        for cfg in sorted((self.root / "configs").iterdir()):
            key_file = cfg / "config_key"
            if key_file.exists():
                out.append(key_file.read_text())
        return sorted(out)

    def query(
        self,
        config_key: Optional[str] = None,
        date_range: Optional[tuple[Optional[str | Date], Optional[str | Date]]] = None,
        limit: Optional[int] = None,
        include_aborted: bool = False,
    ) -> list[RunRecord]:
        """Records newest first, optionally restricted to one config and an inclusive date range."""
        keys = [config_key] if config_key is not None else self.configs()
        lo = hi = None
        if date_range:
            lo, hi = (str(d) if d is not None else None for d in date_range)
        out = []
        for key in keys:
            slug = config_slug(key)
            for d in self._read_lines(slug):
                if not include_aborted and d["status"] != TestStatus.COMPLETED.value:
                    continue
                if lo and d["date"] < lo or hi and d["date"] > hi:
                    continue
                out.append((slug, d))
        out.sort(key=lambda sd: (parse_ts(sd[1]["started_at"]), sd[1]["run_id"]), reverse=True)
        if limit is not None:
            out = out[:limit]
        return [self._load(slug, d) for slug, d in out]

    def daily_aggregate(self, config_key: str, day: str | Date) -> list[DailyAggregate]:
        """One box per phase over that day's COMPLETED run-level phase means."""
        day = str(day)
        runs = self.query(config_key, (day, day))
        if not runs:
            raise NoData(f"no completed runs for {config_key} on {day}")
        boxes = []
        for i, phase in enumerate(runs[0].phases):
            means = [r.phases[i].mean for r in runs if r.phases[i].sample_count > 0]
            if not means:
                continue
            stats = box_stats(means)
            boxes.append(DailyAggregate(day, config_key, i, phase.target_rate_mbps, len(means), **stats))
        if not boxes:
            raise NoData(f"no phase data for {config_key} on {day}")
        return boxes
