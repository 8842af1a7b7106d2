"""CSV and PNG reports over vault contents.

``write_report`` emits, for one configuration and date range:

* ``daily_aggregates.csv``: one row per (day, phase) box, days without a
  completed run are listed in ``missing_days.csv`` instead.
* ``runs.csv``: per-run phase means and verdict.
* ``throughput_evolution.png``: daily boxes per phase over the range.
* ``run_vs_history.png``: one run's samples per phase against its baseline band.
"""

from __future__ import annotations

import csv
from datetime import date, timedelta
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import NoData, RunNotFound  # noqa: E402
from .vault import DailyAggregate, RunRecord, Vault  # noqa: E402
from .verdict import DEFAULT_EPSILON, DEFAULT_K, baseline_for, band  # noqa: E402


def _days(lo: date, hi: date) -> list[date]:
    return [lo + timedelta(days=i) for i in range((hi - lo).days + 1)]


def collect_aggregates(vault: Vault, config_key: str, lo: date, hi: date) -> tuple[list[DailyAggregate], list[str]]:
    boxes, missing = [], []
    for d in _days(lo, hi):
        try:
            boxes.extend(vault.daily_aggregate(config_key, d))
        except NoData:
            missing.append(d.isoformat())
    return boxes, missing


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def plot_evolution(boxes: list[DailyAggregate], days: list[str], out: Path) -> None:
    phases = sorted({b.target_rate_mbps for b in boxes})
    fig, axes = plt.subplots(len(phases) or 1, 1, figsize=(max(6, 0.35 * len(days) + 2), 2.4 * max(1, len(phases))),
                             squeeze=False, sharex=True)
    pos = {d: i for i, d in enumerate(days)}
    for ax, target in zip(axes[:, 0], phases or [0.0]):
        stats = [
            {"med": b.median, "q1": b.q1, "q3": b.q3, "whislo": b.whisker_lo, "whishi": b.whisker_hi,
             "fliers": list(b.outliers), "label": b.date}
            for b in boxes if b.target_rate_mbps == target
        ]
        if stats:
            ax.bxp(stats, positions=[pos[s["label"]] for s in stats], widths=0.6, showfliers=True)
        ax.axhline(target, color="grey", lw=0.8, ls="--")
        ax.set_ylabel(f"{target:g} Mbps")
    axes[-1, 0].set_xticks(range(len(days)))
    axes[-1, 0].set_xticklabels(days, rotation=90, fontsize=7)
    axes[0, 0].set_title("Daily throughput (box over run means)")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)


def plot_run_vs_history(vault: Vault, run: RunRecord, out: Path, k: float = DEFAULT_K,
                        epsilon: float = DEFAULT_EPSILON) -> None:
    base = baseline_for(vault, run.config_key, run.targets, before=run.started_at, exclude_run_id=run.run_id, k=k,
                        built_at=run.started_at)
    n = len(run.phases)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3), squeeze=False)
    for i, ax in enumerate(axes[0]):
        samples = [s for s in run.series.samples if s.phase_index == i]
        t0 = samples[0].t_s if samples else 0.0
        ax.plot([s.t_s - t0 for s in samples], [s.throughput_mbps for s in samples], lw=1, label=run.run_id)
        b = band(base.phases[i], k, epsilon)
        if b is not None:
            ax.axhspan(b[0], b[1], alpha=0.25, color="tab:green", label="history band")
            ax.axhline(base.phases[i].history_mean_mbps, color="tab:green", lw=1)
        ax.set_title(f"{run.phases[i].target_rate_mbps:g} Mbps")
        ax.set_xlabel("t [s]")
    axes[0, 0].set_ylabel("throughput [Mbps]")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)


def write_report(
    vault: Vault,
    config_key: str,
    out_dir: str | Path,
    date_from: Optional[str] = None,
    date_to: Optional[str] = None,
    run_id: Optional[str] = None,
) -> dict:
    """Write the report files; returns their paths and the days with no box."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = vault.query(config_key, include_aborted=True)
    if not runs:
        raise NoData(f"no runs for {config_key}")
    all_days = sorted(r.date for r in runs)
    lo = date.fromisoformat(date_from or all_days[0])
    hi = date.fromisoformat(date_to or all_days[-1])
    in_range = [r for r in runs if lo.isoformat() <= r.date <= hi.isoformat()]

    boxes, missing = collect_aggregates(vault, config_key, lo, hi)
    _write_csv(out / "daily_aggregates.csv",
               ["date", "phase_index", "target_rate_mbps", "run_count", "median", "q1", "q3",
                "whisker_lo", "whisker_hi"],
               [[b.date, b.phase_index, b.target_rate_mbps, b.run_count, repr(b.median), repr(b.q1), repr(b.q3),
                 repr(b.whisker_lo), repr(b.whisker_hi)] for b in boxes])
    _write_csv(out / "missing_days.csv", ["date"], [[d] for d in missing])
    n_phases = max(len(r.phases) for r in runs)
    _write_csv(out / "runs.csv",
               ["run_id", "started_at", "status", "image_tag"] + [f"phase{i}_mean" for i in range(n_phases)]
               + ["verdict"],
               [[r.run_id, r.started_at, r.status.value, r.image_tag]
                + [repr(p.mean) if p.mean is not None else "" for p in r.phases]
                + [(r.verdict or {}).get("outcome", "")] for r in sorted(in_range, key=lambda r: r.started_at)])
    files = {
        "daily_aggregates": str(out / "daily_aggregates.csv"),
        "missing_days": str(out / "missing_days.csv"),
        "runs": str(out / "runs.csv"),
    }
    plot_evolution(boxes, [d.isoformat() for d in _days(lo, hi)], out / "throughput_evolution.png")
    files["throughput_evolution"] = str(out / "throughput_evolution.png")

    completed = [r for r in in_range if r.status.value == "COMPLETED"]
    target_run = None
    if run_id is not None:
        target_run = vault.get(run_id)
        if target_run.config_key != config_key:
            raise RunNotFound(f"run {run_id} is not a {config_key} run")
    elif completed:
        target_run = max(completed, key=lambda r: r.started_at)
    if target_run is not None:
        plot_run_vs_history(vault, target_run, out / "run_vs_history.png")
        files["run_vs_history"] = str(out / "run_vs_history.png")
    return {"config_key": config_key, "from": lo.isoformat(), "to": hi.isoformat(), "files": files,
            "missing_days": missing, "box_count": len(boxes)}
