import hashlib

import pytest
from helpers import spec_text, write_tag

from ranforge.airtest import FaultKind, InterferenceEvent, LinkModel
from ranforge.engine import RunState
from ranforge.errors import PatchConflict, ValidationError
from ranforge.intake import TASKS, TEST_ONLY_TASKS
from ranforge.testbed import Testbed

PLAN_ID = "oai-gnb-n48"


def states(run):
    return [run.task(n).state for n in run.task_names]


def test_submit_and_reload(testbed, repo, tmp_path, clock):
    plan = testbed.submit_spec(spec_text(repo))
    assert plan.plan_id == PLAN_ID and testbed.repo(PLAN_ID).url == str(repo)
    again = Testbed(testbed.data_dir, clock=clock)
    assert again.plan(PLAN_ID) == plan
    again.close()


def test_relative_repo_resolved_against_base_dir(testbed, repo):
    testbed.submit_spec(spec_text(repo).replace(str(repo), "repo"), base_dir=repo.parent)
    assert testbed.repo(PLAN_ID).url == str(repo.resolve())


def test_full_pipeline_then_skip_then_new_tag(testbed, repo):
    testbed.submit_spec(spec_text(repo))
    run = testbed.trigger(PLAN_ID)
    assert run.state is RunState.SUCCEEDED and run.task_names == list(TASKS)
    test_out = run.task("continuous-test").output
    assert test_out["verdict"] == "INCONCLUSIVE" and test_out["phase_means"][0] == pytest.approx(10.0, abs=0.2)
    assert run.task("deploy").output["instance_count"] == 35
    assert testbed.inventory.placements(active_only=True) == []

    run = testbed.trigger(PLAN_ID)
    assert run.state is RunState.SKIPPED
    assert [run.task(n).state for n in ("build", "deploy", "continuous-test")] == [RunState.SKIPPED] * 3

    write_tag(repo, "v2.2.0", "b" * 40, "2024-06-20T00:00:00Z")
    run = testbed.trigger(PLAN_ID)
    assert run.state is RunState.SUCCEEDED
    assert run.task("build").output["image"]["tag_name"] == "v2.2.0"
    tid = run.task("continuous-test").output["test_run_id"]
    assert testbed.vault.get(tid).verdict is not None


def test_test_schedule_reuses_latest_image(testbed, repo):
    testbed.submit_spec(spec_text(repo))
    testbed.trigger(PLAN_ID)
    outcomes = []
    for _ in range(6):
        run = testbed.trigger(PLAN_ID, schedule="test")
        assert run.task_names == list(TEST_ONLY_TASKS) and run.state is RunState.SUCCEEDED
        outcomes.append(run.task("continuous-test").output["verdict"])
    assert outcomes[:4] == ["INCONCLUSIVE"] * 4 and outcomes[4:] == ["PASS", "PASS"]


def test_test_schedule_without_image_fails(testbed, repo):
    testbed.submit_spec(spec_text(repo))
    run = testbed.trigger(PLAN_ID, schedule="test")
    assert run.state is RunState.FAILED and run.task("deploy").error["code"] == "artifact_missing"


def test_stuck_server_records_inconclusive_and_frees_resources(testbed, repo):
    testbed.submit_spec(spec_text(repo))
    testbed.links[PLAN_ID] = LinkModel(faults=frozenset({FaultKind.SERVER_STUCK}), stuck_at_s=100)
    run = testbed.trigger(PLAN_ID)
    ct = run.task("continuous-test")
    assert run.state is RunState.FAILED and ct.attempt == 3 and ct.error["code"] == "server_stuck"
    aborted = testbed.vault.query(include_aborted=True)
    assert len(aborted) == 3 and all(r.verdict["outcome"] == "INCONCLUSIVE" for r in aborted)
    assert testbed.inventory.placements(active_only=True) == []


def test_degraded_link_fails_only_its_phase(testbed, repo):
    testbed.submit_spec(spec_text(repo))
    testbed.trigger(PLAN_ID)
    for _ in range(5):
        testbed.trigger(PLAN_ID, schedule="test")
    testbed.links[PLAN_ID] = LinkModel(noise_std_mbps=0.25, seed=7,
                                       interference_events=(InterferenceEvent(120, 180, 0.5),))
    run = testbed.trigger(PLAN_ID, schedule="test")
    out = run.task("continuous-test").output
    assert out["verdict"] == "FAIL" and "30 Mbps" in out["verdict_reason"]
    assert "10 Mbps" not in out["verdict_reason"] and "20 Mbps" not in out["verdict_reason"]


def test_patches_resolved_and_pinned(testbed, repo, tmp_path):
    body = "--- /dev/null\n+++ b/notes.txt\n@@ -0,0 +1 @@\n+hello\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    text = spec_text(repo) + f"patches:\n  - {{path: fix.patch, sha256: {digest}}}\n"
    with pytest.raises(ValidationError):
        testbed.submit_spec(text)
    plan = testbed.submit_spec(text, patch_bodies={"fix.patch": body})
    assert len(testbed.stored(plan.plan_id).patches) == 1
    run = testbed.trigger(PLAN_ID)
    assert run.state is RunState.SUCCEEDED
    assert run.task("build").output["image"]["tag_name"].startswith("v2.1.0+p")
    with pytest.raises(PatchConflict):
        testbed.submit_spec(text, patch_bodies={"fix.patch": body + "tampered"})
