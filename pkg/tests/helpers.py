"""Fixture builders shared by several test modules."""

import json
from pathlib import Path

from ranforge.intake import example_spec_text

EXAMPLE_REPO_URL = "https://gitlab.eurecom.fr/oai/openairinterface5g.git"


def write_tag(repo: Path, name: str, commit: str, created_at: str, files=None) -> None:
    (repo / "tags").mkdir(parents=True, exist_ok=True)
    doc = {"commit_id": commit, "created_at": created_at}
    if files:
        doc["files"] = files
    (repo / "tags" / f"{name}.json").write_text(json.dumps(doc))


def spec_text(repo: Path, **overrides) -> str:
    text = example_spec_text().replace(EXAMPLE_REPO_URL, str(repo))
    for key, value in overrides.items():
        lines = [ln for ln in text.splitlines() if not ln.startswith(f"{key}:")]
        text = "\n".join(lines) + f"\n{key}: {value}\n"
    return text


def make_run(run_id, started_at="2024-07-01T00:00:00Z", link=None, phases=((10, 60), (20, 60), (30, 60)),
             status=None, stuck_at=None, image_name="oai-gnb", image_tag="v2.1.0"):
    """A TestRun simulated straight from a link model, without any harness."""
    from ranforge.airtest import FaultKind, LinkModel, Phase, TestRun, TestStatus, simulate_series

    link = link or LinkModel(40.0)
    if stuck_at is not None:
        link = LinkModel(**{**link.__dict__, "faults": frozenset({FaultKind.SERVER_STUCK}), "stuck_at_s": stuck_at})
    phases = tuple(Phase(float(t), int(d)) for t, d in phases)
    series, aborted = simulate_series(phases, link)
    if status is None:
        status = TestStatus.ABORTED if aborted is not None else TestStatus.COMPLETED
    return TestRun(
        run_id=run_id, deployment_id="dep-0001", plan_id="plan-x", phases=phases, series=series, status=status,
        started_at=started_at, image_name=image_name, image_tag=image_tag, band_id="n48", prb_count=162,
        abort_reason=None if status is TestStatus.COMPLETED else "traffic server stuck",
    )


KEY = "oai-gnb|n48|162prb|10,20,30"


def record(run_id, phase_values, key=KEY, targets=(10.0, 20.0, 30.0), status=None, started_at="2024-07-01T00:00:00Z"):
    """A RunRecord whose phases hold exactly ``phase_values`` (one list of samples per phase)."""
    from ranforge.airtest import KpiSeries, Sample, TestStatus
    from ranforge.vault import RunRecord, summarize

    samples, t = [], 0.0
    for i, vals in enumerate(phase_values):
        for v in vals:
            samples.append(Sample(t, i, float(v), 0.0))
            t += 1.0
    series = KpiSeries(tuple(samples))
    return RunRecord(
        run_id=run_id, config_key=key, date=started_at[:10], started_at=started_at,
        status=status or TestStatus.COMPLETED, plan_id="plan-x", deployment_id="dep-0001", image_name="oai-gnb",
        image_tag="v2.1.0", band_id="n48", prb_count=162, phases=summarize(series, targets),
        series_ref=f"series/{run_id}.csv", series=series,
    )
