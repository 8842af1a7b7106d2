import json
from types import SimpleNamespace

import jsonschema
import pytest
from fastapi.testclient import TestClient
from helpers import spec_text

from ranforge.gateway.api import create_app
from ranforge.gateway.cli import main
from ranforge.gateway.schemas import ENDPOINTS, ERROR
from ranforge.testbed import Testbed

PLAN_ID = "oai-gnb-n48"
IMAGE = SimpleNamespace(image_name="oai-gnb", tag_name="v2.1.0", digest="sha256:" + "0" * 64)


@pytest.fixture
def client(testbed):
    with TestClient(create_app(testbed)) as c:
        yield c


def ok(resp, method, path, status=200):
    assert resp.status_code == status, resp.text
    body = resp.json()
    jsonschema.validate(body, ENDPOINTS[(method, path)])
    return body


def err(resp, status, code):
    assert resp.status_code == status, resp.text
    body = resp.json()
    jsonschema.validate(body, ERROR)
    assert body["code"] == code
    return body


def submit(client, repo):
    return client.post("/specs", content=spec_text(repo), headers={"content-type": "application/yaml"})


def test_healthz_and_schemas(client):
    assert client.get("/healthz").json() == {"status": "ok"}
    doc = client.get("/schemas").json()
    assert set(doc) == {"error", "endpoints"} and "GET /radios" in doc["endpoints"]
    for schema in doc["endpoints"].values():
        jsonschema.Draft202012Validator.check_schema(schema)


def test_radios_and_band_filter(client):
    radios = ok(client.get("/radios"), "GET", "/radios")
    assert len(radios) == 16 and len({r["radio_id"] for r in radios}) == 16
    n48 = ok(client.get("/radios", params={"band": "n48"}), "GET", "/radios")
    assert n48 and all("n48" in r["bands"] for r in n48)


def test_unknown_plan_is_404(client):
    err(client.get("/plans/nope"), 404, "plan_not_found")
    err(client.post("/pipelines/nope/trigger", json={}), 404, "plan_not_found")


def test_bad_spec_bodies(client):
    err(client.post("/specs", content=b"", headers={"content-type": "application/yaml"}), 400, "spec_syntax")
    err(client.post("/specs", content=b"a: [", headers={"content-type": "application/yaml"}), 400, "spec_syntax")
    err(client.post("/specs", content=b"{", headers={"content-type": "application/json"}), 400, "spec_syntax")


def test_submit_trigger_and_inspect(client, repo):
    plan = ok(submit(client, repo), "POST", "/specs", 201)
    assert plan["plan_id"] == PLAN_ID and plan["workload_count"] == 35
    assert [p["plan_id"] for p in ok(client.get("/plans"), "GET", "/plans")] == [PLAN_ID]
    ok(client.get(f"/plans/{PLAN_ID}"), "GET", "/plans/{plan_id}")

    run = ok(client.post(f"/pipelines/{PLAN_ID}/trigger", json={"wait": True}), "POST",
             "/pipelines/{plan_id}/trigger", 202)
    assert run["state"] == "SUCCEEDED"
    assert ok(client.get(f"/runs/{run['run_id']}"), "GET", "/runs/{run_id}") == run
    assert [r["run_id"] for r in ok(client.get("/runs", params={"plan": PLAN_ID}), "GET", "/runs")] == [run["run_id"]]
    err(client.get("/runs/missing"), 404, "run_not_found")

    images = ok(client.get("/images"), "GET", "/images")
    assert [(i["image_name"], i["tag_name"]) for i in images] == [("oai-gnb", "v2.1.0")]

    results = ok(client.get("/results"), "GET", "/results")
    assert len(results) == 1
    rid, key = results[0]["run_id"], results[0]["config_key"]
    ok(client.get(f"/results/{rid}"), "GET", "/results/{run_id}")
    csv = client.get(f"/results/{rid}/series.csv")
    assert csv.status_code == 200 and csv.headers["content-type"].startswith("text/csv")
    assert ok(client.get("/configs"), "GET", "/configs") == [key]
    aggs = ok(client.get("/aggregates", params={"config": key, "date": results[0]["date"]}), "GET", "/aggregates")
    assert [a["target_rate_mbps"] for a in aggs] == [10.0, 20.0, 30.0]
    v = ok(client.get(f"/verdicts/{rid}"), "GET", "/verdicts/{run_id}")
    assert v["outcome"] == "INCONCLUSIVE"
    b = ok(client.get(f"/baselines/{key}"), "GET", "/baselines/{config_key}")
    assert b["status"] == "PROVISIONAL" and b["run_count"] == 1


def test_baseline_and_verdict_missing(client):
    err(client.get("/baselines/oai-gnb|n48|162prb|10,20,30"), 404, "baseline_not_found")
    err(client.get("/verdicts/nope"), 404, "run_not_found")


def test_create_run_then_exec_tasks(client, repo):
    submit(client, repo)
    run = ok(client.post(f"/pipelines/{PLAN_ID}/runs", json={}), "POST", "/pipelines/{plan_id}/runs", 201)
    assert run["state"] == "PENDING"
    rid = run["run_id"]
    err(client.post(f"/runs/{rid}/tasks/build"), 409, "predecessor_not_satisfied")
    rec = ok(client.post(f"/runs/{rid}/tasks/trigger"), "POST", "/runs/{run_id}/tasks/{task}")
    assert rec["state"] == "SUCCEEDED"


def test_placements_roundtrip(client):
    p = ok(client.post("/placements", json={"isolated_cores_needed": 2, "band_id": "n48", "prbs_needed": 50}),
           "POST", "/placements", 201)
    active = ok(client.get("/placements", params={"active": True}), "GET", "/placements")
    assert [x["placement_id"] for x in active] == [p["placement_id"]]
    rel = ok(client.post(f"/placements/{p['placement_id']}/release"), "POST", "/placements/{placement_id}/release")
    assert rel["state"] == "RELEASED"
    assert client.get("/placements", params={"active": True}).json() == []
    err(client.post("/placements", json={"isolated_cores_needed": 31, "band_id": "n48"}), 409, "no_feasible_node")
    err(client.post("/placements", json={"latency_class": "FAST"}), 422, "invalid_input")


def test_agent_endpoints(client, testbed, repo):
    testbed.submit_spec(spec_text(repo))
    plan = testbed.plan(PLAN_ID)
    placement = testbed.inventory.match(plan.resource_claim)
    dep = testbed.inventory.deploy(plan, IMAGE, placement.placement_id).deployment_id
    err(client.post("/gnb/start", json={}), 422, "invalid_input")
    err(client.post("/gnb/start", json={"deployment_id": "nope"}), 404, "deployment_not_found")
    ok(client.post("/gnb/start", json={"deployment_id": dep}), "POST", "/gnb/start")
    body = {"deployment_id": dep, "link": {"nominal_capacity_mbps": 40.0}}
    err(client.post("/ue/traffic", json={**body, "phases": [{"target_rate_mbps": 10, "duration_s": 5}]}), 409,
        "ue_not_connected")
    att = ok(client.post("/ue/attach", json=body), "POST", "/ue/attach")
    assert att["route_installed"] is True
    run = ok(client.post("/ue/traffic", json={**body, "run_id": "agent-1", "band_id": "n48", "prb_count": 162,
                                              "phases": [{"target_rate_mbps": 10, "duration_s": 5}]}),
             "POST", "/ue/traffic")
    assert run["status"] == "COMPLETED" and run["sample_count"] == 5
    assert client.get("/results/agent-1").status_code == 200
    td = ok(client.post("/teardown", json={"deployment_id": dep}), "POST", "/teardown")
    assert td["placement_released"] is True
    assert client.post("/teardown", json={"deployment_id": dep}).json() == td


# -- CLI


def cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_json_matches_http(tmp_path, capsys, clock):
    data = tmp_path / "cli"
    code, out, _ = cli(capsys, "--data-dir", str(data), "inv", "ls", "--json")
    assert code == 0
    tb = Testbed(data, clock=clock)
    with TestClient(create_app(tb)) as c:
        assert json.loads(out) == c.get("/radios").json()
        code, out, _ = cli(capsys, "inv", "capacity", "--json", "--data-dir", str(data))
        assert code == 0 and json.loads(out) == c.get("/capacity").json()
    tb.close()


def test_cli_spec_commands(tmp_path, capsys, repo):
    f = tmp_path / "spec.yaml"
    f.write_text(spec_text(repo))
    code, out, _ = cli(capsys, "spec", "validate", str(f))
    assert code == 0 and out.startswith("ok: ")
    code, out, _ = cli(capsys, "--json", "spec", "compile", str(f))
    assert code == 0 and json.loads(out)["plan_id"] == PLAN_ID
    code, out, _ = cli(capsys, "--data-dir", str(tmp_path / "d"), "--json", "spec", "compile", "--submit", str(f))
    assert code == 0
    code, out, _ = cli(capsys, "--data-dir", str(tmp_path / "d"), "--json", "spec", "ls")
    assert [p["plan_id"] for p in json.loads(out)] == [PLAN_ID]


def test_cli_exit_codes(tmp_path, capsys, repo):
    d = str(tmp_path / "d")
    assert cli(capsys, "bogus")[0] == 2
    assert cli(capsys, "inv", "claim", "--cores", "x")[0] == 2
    code, _, errout = cli(capsys, "--data-dir", d, "--json", "run", "status", "nope")
    assert code == 4 and json.loads(errout)["code"] == "run_not_found"
    code, _, errout = cli(capsys, "--data-dir", d, "results", "baseline", "nope")
    assert code == 4 and "baseline_not_found" in errout
    f = tmp_path / "bad.yaml"
    f.write_text("name: [")
    assert cli(capsys, "spec", "validate", str(f))[0] == 3


def test_cli_run_start_reports_failure(tmp_path, capsys, repo):
    d = str(tmp_path / "d")
    f = tmp_path / "spec.yaml"
    f.write_text(spec_text(repo))
    assert cli(capsys, "--data-dir", d, "spec", "compile", "--submit", str(f))[0] == 0
    # the test schedule needs an image that was never built
    code, out, _ = cli(capsys, "--data-dir", d, "--json", "run", "start", PLAN_ID, "--schedule", "test")
    assert code == 7 and json.loads(out)["state"] == "FAILED"
