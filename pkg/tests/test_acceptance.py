"""Acceptance checks, one test per criterion; each prints a single pass/fail line."""

import math
import os
import random
import signal
import subprocess
import sys
import textwrap
import threading
import time
from contextlib import contextmanager
from datetime import date, datetime, timedelta, timezone
from fractions import Fraction
from types import SimpleNamespace

import pytest
from helpers import KEY, make_run, spec_text, write_tag
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from invariants import check_conservation, seeded_interleaving
from oracles import brute_force_outcome, random_pair

from ranforge.airtest import InterferenceEvent, LinkModel, Phase, phase_means, simulate_series
from ranforge.clock import VirtualClock
from ranforge.cron import fires_between
from ranforge.engine import RunState
from ranforge.errors import NoData, NoFeasibleNode
from ranforge.intake import compile_plan, example_spec_text, parse_spec
from ranforge.inventory import GiB, Inventory, ResourceClaim, WorkloadRole, default_inventory_document
from ranforge.testbed import Testbed
from ranforge.vault import Vault
from ranforge.verdict import Outcome, build_baseline, judge, judge_run

PLAN_ID = "oai-gnb-n48"
UTC = timezone.utc
IMAGE = SimpleNamespace(image_name="oai-gnb", tag_name="v2.1.0", digest="sha256:" + "0" * 64)


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def check(n, what):
        try:
            yield
        except BaseException as exc:
            with capsys.disabled():
                print(f"\ncriterion {n}: FAIL {what}: {type(exc).__name__}: {exc}")
            raise
        with capsys.disabled():
            print(f"\ncriterion {n}: PASS {what}")
    return check


def new_testbed(root, repo, link_factory=None):
    tb = Testbed(root, clock=VirtualClock("2024-07-01T00:00:00Z"), link_factory=link_factory)
    tb.submit_spec(spec_text(repo))
    return tb


def test_01_skip_then_new_tag(criterion, tmp_path, repo):
    with criterion(1, "no new tag skips build/deploy/test; a new tag builds, deploys, tests and judges in < 10 s"):
        t0 = time.monotonic()
        tb = new_testbed(tmp_path / "d", repo)
        try:
            assert tb.trigger(PLAN_ID).state is RunState.SUCCEEDED
            skipped = tb.trigger(PLAN_ID)
            assert skipped.state is RunState.SKIPPED
            assert [skipped.task(t).state for t in ("build", "deploy", "continuous-test")] == [RunState.SKIPPED] * 3
            write_tag(repo, "v2.2.0", "b" * 40, "2024-06-20T00:00:00Z")
            run = tb.trigger(PLAN_ID)
            assert run.state is RunState.SUCCEEDED
            assert all(run.task(t).state is RunState.SUCCEEDED for t in ("build", "deploy", "continuous-test"))
            assert run.task("build").output["image"]["tag_name"] == "v2.2.0"
            test_id = run.task("continuous-test").output["test_run_id"]
            assert tb.vault.get(test_id).verdict is not None
        finally:
            tb.close()
        assert time.monotonic() - t0 < 10.0


def test_02_manifest_fidelity(criterion):
    with criterion(2, "the example manifest deploys 35 instances with role counts (1, 1, 3, 3, 27)"):
        inv = Inventory.default()
        plan = compile_plan(parse_spec(example_spec_text()))
        dep = inv.deploy(plan, IMAGE, inv.match(plan.resource_claim).placement_id)
        roles = (WorkloadRole.GNB, WorkloadRole.TRAFFIC_SERVER, WorkloadRole.DATA_COLLECTOR, WorkloadRole.DASHBOARD,
                 WorkloadRole.CORE_FUNCTION)
        assert len(dep.instances) == 35
        assert tuple(len(dep.by_role(r)) for r in roles) == (1, 1, 3, 3, 27)


def test_03_worker_rt_bounds(criterion):
    with criterion(3, "the real-time worker accepts 30 cores / 64 GiB and rejects 31 cores or 65 GiB"):
        doc = default_inventory_document()
        doc["nodes"] = [n for n in doc["nodes"] if n["node_id"] == "worker-rt-0"]
        doc["radios"] = [r for r in doc["radios"] if r["attached_node"] == "worker-rt-0"]
        inv = Inventory.from_document(doc)
        p = inv.match(ResourceClaim(isolated_cores_needed=30, hugepage_bytes_needed=64 * GiB, radios_needed=0))
        assert len(p.cores) == 30 and p.hugepage_bytes == 64 * GiB
        inv.release(p.placement_id)
        for cores, gib in ((31, 0), (0, 65)):
            with pytest.raises(NoFeasibleNode):
                inv.match(ResourceClaim(isolated_cores_needed=cores, hugepage_bytes_needed=gib * GiB,
                                        radios_needed=0))


def test_04_resource_conservation(criterion):
    with criterion(4, "10,000 random match/release interleavings conserve resources in < 60 s; no radio claimed twice"):
        seen = []

        @settings(max_examples=10_000, deadline=None, database=None, derandomize=True,
                  suppress_health_check=list(HealthCheck))
        @given(st.integers(0, 2**32 - 1))
        def interleaving(seed):
            seeded_interleaving(seed)
            seen.append(seed)

        t0 = time.monotonic()
        interleaving()
        elapsed = time.monotonic() - t0
        assert len(set(seen)) >= 10_000
        assert elapsed < 60.0, f"{elapsed:.1f} s"

        inv = Inventory.default()
        barrier = threading.Barrier(32)
        got = []

        def worker():
            barrier.wait()
            try:
                got.append(inv.match(ResourceClaim(isolated_cores_needed=1, hugepage_bytes_needed=0, band_id="n48",
                                                   prbs_needed=1)))
            except NoFeasibleNode:
                pass

        threads = [threading.Thread(target=worker) for _ in range(32)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        radios = [r for p in got for r in p.radio_ids]
        assert radios and len(radios) == len(set(radios))
        check_conservation(inv)


def test_05_simulation_fidelity(criterion):
    with criterion(5, "40 Mbps clean link meets every target with zero loss; a 0.5 event caps phase 3 at 20 Mbps"):
        phases = [Phase(10, 60), Phase(20, 60), Phase(30, 60)]

        def loss_means(series):
            return [math.fsum(s.packet_loss_frac for s in series.phase(i)) / len(series.phase(i)) for i in range(3)]

        series, aborted = simulate_series(phases, LinkModel(40.0))
        assert aborted is None
        assert all(abs(m - t) <= 1e-9 for m, t in zip(phase_means(series, 3), (10, 20, 30)))
        assert loss_means(series) == [0.0, 0.0, 0.0]

        series, _ = simulate_series(phases, LinkModel(40.0, interference_events=(InterferenceEvent(120, 180, 0.5),)))
        # closed form: delivered = min(target, capacity * scale), loss = 1 - delivered / target
        delivered = min(Fraction(30), Fraction(40) * Fraction(1, 2))
        assert abs(phase_means(series, 3)[2] - float(delivered)) <= 1e-9
        assert abs(loss_means(series)[2] - float(1 - delivered / 30)) <= 1e-9


def _regression_scenario(root, repo):
    seeds = iter(range(1000))
    tb = new_testbed(root, repo, lambda plan, run_id: LinkModel(noise_std_mbps=0.25, seed=next(seeds)))
    try:
        tb.trigger(PLAN_ID)
        for _ in range(5):
            tb.trigger(PLAN_ID, schedule="test")
        clean = tb.trigger(PLAN_ID, schedule="test").task("continuous-test").output
        tb.links[PLAN_ID] = LinkModel(noise_std_mbps=0.25, seed=7,
                                      interference_events=(InterferenceEvent(120, 180, 0.5),))
        bad = tb.trigger(PLAN_ID, schedule="test").task("continuous-test").output
        # run ids are random; everything else must repeat exactly
        return [{k: v for k, v in tb.vault.get(o["test_run_id"]).verdict.items() if k not in ("run_id", "built_from")}
                | {"history": len(tb.vault.get(o["test_run_id"]).verdict["built_from"])} for o in (clean, bad)]
    finally:
        tb.close()


def test_06_regression_discrimination(criterion, tmp_path, repo):
    with criterion(6, "with >= 5 clean runs of history a clean run passes and a phase-3 degradation fails only 30 Mbps"):
        clean, bad = _regression_scenario(tmp_path / "a", repo)
        assert clean["history"] >= 5 and clean["baseline_status"] == "READY"
        assert clean["outcome"] == "PASS" and all(p["phase_ok"] for p in clean["phases"])
        assert bad["outcome"] == "FAIL"
        assert {p["target_rate_mbps"]: p["phase_ok"] for p in bad["phases"]} == {10.0: True, 20.0: True, 30.0: False}
        assert _regression_scenario(tmp_path / "b", repo) == [clean, bad]


def test_07_verdict_oracle_equivalence(criterion):
    with criterion(7, "1,000 random (history, run) pairs agree with a brute-force sample-by-sample judge"):
        rng = random.Random(7)
        mismatches = 0
        for _ in range(1000):
            history, run, hist_means, run_vals = random_pair(rng)
            k, theta, eps = rng.choice([1.0, 2.0, 3.0]), rng.choice([0.5, 0.9, 1.0]), rng.choice([0.0, 0.5])
            got = judge(run, build_baseline(run.config_key, history, k=k), theta=theta, epsilon=eps).outcome
            mismatches += got is not brute_force_outcome(hist_means, run_vals, k, theta, eps)
        assert mismatches == 0


def test_08_missing_box(criterion, tmp_path):
    with criterion(8, "a day of aborted runs has no box and no PASS/FAIL verdict"):
        v = Vault(tmp_path / "v")
        for i in range(5):
            v.ingest(make_run(f"h{i}", started_at=f"2024-07-01T0{i}:00:00Z"))
        for i, stuck in enumerate((10, 100)):
            v.ingest(make_run(f"a{i}", started_at=f"2024-07-02T0{i}:00:00Z", stuck_at=stuck))
        with pytest.raises(NoData):
            v.daily_aggregate(KEY, "2024-07-02")
        for rid in ("a0", "a1"):
            assert judge_run(v, rid).outcome is Outcome.INCONCLUSIVE
        assert len(v.daily_aggregate(KEY, "2024-07-01")) == 3


CHILD = textwrap.dedent("""
    import sys, time
    sys.path.insert(0, {tests!r})
    from helpers import make_run
    from ranforge.airtest import LinkModel
    from ranforge.vault import Vault
    v = Vault({root!r})
    for i in range(3):
        v.ingest(make_run(f"k{{i}}", started_at=f"2024-07-01T0{{i}}:00:00Z", link=LinkModel(40.0, 0.25, seed=i)))
        print(f"ack k{{i}}", flush=True)
    time.sleep(60)
""")


def test_09_durability_and_idempotence(criterion, tmp_path, repo):
    with criterion(9, "records survive a kill after acknowledgment; ingest and teardown are idempotent"):
        root = str(tmp_path / "v")
        proc = subprocess.Popen([sys.executable, "-c", CHILD.format(tests=os.path.dirname(__file__), root=root)],
                                stdout=subprocess.PIPE, text=True)
        acks = [proc.stdout.readline().strip() for _ in range(3)]
        proc.send_signal(signal.SIGKILL)
        proc.wait()
        assert acks == ["ack k0", "ack k1", "ack k2"]
        v = Vault(root)
        for i in range(3):
            expected = make_run(f"k{i}", started_at=f"2024-07-01T0{i}:00:00Z", link=LinkModel(40.0, 0.25, seed=i))
            assert v.get(f"k{i}").series == expected.series
            assert v.series_csv(f"k{i}") == expected.series.to_csv()
        before = [r.to_dict() for r in v.query(KEY)]
        assert v.ingest(make_run("k0", started_at="2024-07-01T00:00:00Z", link=LinkModel(40.0, 0.25, seed=0))) \
            == v.get("k0")
        assert [r.to_dict() for r in Vault(root).query(KEY)] == before

        tb = new_testbed(tmp_path / "d", repo)
        try:
            plan = tb.plan(PLAN_ID)
            dep = tb.inventory.deploy(plan, IMAGE, tb.inventory.match(plan.resource_claim).placement_id)
            first = tb.harness.teardown(dep)
            cap = tb.inventory.capacity()
            assert tb.harness.teardown(dep) == first and tb.inventory.capacity() == cap
        finally:
            tb.close()


def test_10_cadence(criterion):
    with criterion(10, "the 6-hourly cron fires 4 times per UTC day and the Sunday cron once per week"):
        cadences = {s.name: s.cadence for s in compile_plan(parse_spec(example_spec_text())).schedules}
        day = date(2024, 1, 1)
        while day.year == 2024:
            lo = datetime(day.year, day.month, day.day, tzinfo=UTC)
            fires = fires_between(cadences["test"], lo, lo + timedelta(days=1))
            assert [f.hour for f in fires] == [0, 6, 12, 18]
            day += timedelta(days=1)
        start = datetime(2024, 1, 1, 3, 17, tzinfo=UTC)
        for w in range(104):
            lo = start + timedelta(days=7 * w)
            fires = fires_between(cadences["pipeline"], lo, lo + timedelta(days=7))
            assert len(fires) == 1 and fires[0].weekday() == 6
