import json
import os
import signal
import statistics
import subprocess
import sys
import textwrap
import threading

import numpy as np
import pytest
from helpers import make_run
from hypothesis import given, settings
from hypothesis import strategies as st

from ranforge.airtest import InterferenceEvent, KpiSeries, LinkModel, Sample, TestStatus
from ranforge.errors import CorruptRecord, NoData, RunNotFound, StorageFailure, VerdictAlreadyRecorded
from ranforge.vault import Vault, box_stats, config_key, config_slug, summarize

KEY = "oai-gnb|n48|162prb|10,20,30"


def test_config_key_format():
    assert config_key("oai-gnb", "n48", 162, [10.0, 20.0, 30.0]) == KEY
    assert config_key("oai-gnb", "n48", 162, [2.5]) == "oai-gnb|n48|162prb|2.5"
    assert config_slug(KEY) != config_slug(KEY.replace("30", "31"))
    assert "/" not in config_slug("a/b|c")


def test_quartiles_against_inclusive_quantiles():
    got = box_stats([29, 30, 30, 31])
    q1, med, q3 = statistics.quantiles([29, 30, 30, 31], n=4, method="inclusive")
    assert (got["q1"], got["median"], got["q3"]) == (q1, med, q3) == (29.75, 30.0, 30.25)
    assert (got["whisker_lo"], got["whisker_hi"], got["outliers"]) == (29.0, 31.0, ())


def test_single_value_box_is_degenerate():
    got = box_stats([27.5])
    assert got == {"median": 27.5, "q1": 27.5, "q3": 27.5, "whisker_lo": 27.5, "whisker_hi": 27.5, "outliers": ()}


def test_outlier_split():
    got = box_stats([10, 10.1, 10.2, 10.3, 30])
    assert got["outliers"] == (30.0,) and got["whisker_hi"] == 10.3


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=30))
def test_box_stats_oracle(values):
    got = box_stats(values)
    q1, med, q3 = statistics.quantiles(values, n=4, method="inclusive")
    assert got["q1"] == pytest.approx(q1, abs=1e-9)
    assert got["median"] == pytest.approx(med, abs=1e-9)
    assert got["q3"] == pytest.approx(q3, abs=1e-9)
    iqr = q3 - q1
    inside = [v for v in values if q1 - 1.5 * iqr - 1e-9 <= v <= q3 + 1.5 * iqr + 1e-9]
    assert got["whisker_lo"] == pytest.approx(min(min(inside), q1), abs=1e-9)
    assert got["whisker_hi"] == pytest.approx(max(max(inside), q3), abs=1e-9)
    assert got["whisker_lo"] <= got["q1"] + 1e-9 and got["q3"] <= got["whisker_hi"] + 1e-9
    assert len(got["outliers"]) + sum(got["whisker_lo"] <= v <= got["whisker_hi"] for v in values) == len(values)


def test_summary_uses_sample_std():
    samples = tuple(Sample(float(i), 0, v, 0.0) for i, v in enumerate([28.0, 29.0, 30.0, 31.0, 32.0]))
    (s,) = summarize(KpiSeries(samples), [30.0])
    assert s.mean == 30.0 and s.std == pytest.approx(1.5811388300841898, abs=1e-12)
    assert (s.min, s.max, s.sample_count) == (28.0, 32.0, 5)


def test_ingest_get_and_idempotence(tmp_path):
    v = Vault(tmp_path / "v")
    run = make_run("r1", link=LinkModel(40.0, 0.25, seed=3))
    rec = v.ingest(run)
    assert rec.config_key == KEY and rec.status is TestStatus.COMPLETED
    assert rec.series == run.series
    again = v.ingest(run)
    assert again == rec
    lines = (tmp_path / "v" / "configs" / config_slug(KEY) / "records.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert v.get("r1") == rec and v.has("r1") and not v.has("r2")
    with pytest.raises(RunNotFound):
        v.get("r2")
    assert v.series_csv("r1") == run.series.to_csv()
    assert v.configs() == [KEY]


def test_aborted_run_partial_summaries(tmp_path):
    v = Vault(tmp_path / "v")
    rec = v.ingest(make_run("a1", stuck_at=90))
    assert rec.status is TestStatus.ABORTED
    assert [p.sample_count for p in rec.phases] == [60, 30, 0]
    assert rec.phases[2].mean is None and rec.phases[1].mean == 20.0
    assert v.query(KEY) == []
    assert [r.run_id for r in v.query(KEY, include_aborted=True)] == ["a1"]


def test_query_order_range_and_limit(tmp_path):
    v = Vault(tmp_path / "v")
    for i, ts in enumerate(["2024-07-01T06:00:00Z", "2024-07-01T00:00:00.500000Z", "2024-07-02T00:00:00Z"]):
        v.ingest(make_run(f"r{i}", started_at=ts))
    assert [r.run_id for r in v.query(KEY)] == ["r2", "r0", "r1"]
    assert [r.run_id for r in v.query(KEY, ("2024-07-01", "2024-07-01"))] == ["r0", "r1"]
    assert [r.run_id for r in v.query(KEY, limit=1)] == ["r2"]
    assert v.query("other|n48|1prb|1") == []


def test_daily_aggregate_over_run_means(tmp_path):
    v = Vault(tmp_path / "v")
    rates = [29.0, 30.0, 30.0, 31.0]
    for i, cap in enumerate(rates):
        # capacity below the 30 Mbps target caps only that phase
        v.ingest(make_run(f"r{i}", started_at=f"2024-07-01T{6 * i:02d}:00:00Z", link=LinkModel(cap)))
    boxes = v.daily_aggregate(KEY, "2024-07-01")
    assert [b.target_rate_mbps for b in boxes] == [10.0, 20.0, 30.0]
    b = boxes[2]
    assert (b.run_count, b.q1, b.median, b.q3) == (4, 29.75, 30.0, 30.0)
    assert boxes[0].median == 10.0 and boxes[0].q1 == boxes[0].q3 == 10.0


def test_day_with_only_aborted_runs_has_no_box(tmp_path):
    v = Vault(tmp_path / "v")
    v.ingest(make_run("a1", started_at="2024-07-03T00:00:00Z", stuck_at=10))
    v.ingest(make_run("a2", started_at="2024-07-03T06:00:00Z", stuck_at=100))
    with pytest.raises(NoData):
        v.daily_aggregate(KEY, "2024-07-03")
    with pytest.raises(NoData):
        v.daily_aggregate(KEY, "2024-07-04")


def test_verdict_attach_once(tmp_path):
    v = Vault(tmp_path / "v")
    v.ingest(make_run("r1"))
    assert v.attach_verdict("r1", {"outcome": "PASS"}).verdict == {"outcome": "PASS"}
    v.attach_verdict("r1", {"outcome": "PASS"})
    with pytest.raises(VerdictAlreadyRecorded):
        v.attach_verdict("r1", {"outcome": "FAIL"})
    assert Vault(tmp_path / "v").get("r1").verdict == {"outcome": "PASS"}


def test_tampered_series_detected(tmp_path):
    v = Vault(tmp_path / "v")
    v.ingest(make_run("r1"))
    path = tmp_path / "v" / "configs" / config_slug(KEY) / "series" / "r1.csv"
    path.write_text(path.read_text().replace(",10.0,", ",11.0,", 1))
    with pytest.raises(CorruptRecord):
        v.get("r1")


def test_unknown_layout_version(tmp_path):
    Vault(tmp_path / "v")
    (tmp_path / "v" / "VERSION").write_text("7")
    with pytest.raises(StorageFailure):
        Vault(tmp_path / "v")


def test_torn_tail_truncated_on_open(tmp_path):
    v = Vault(tmp_path / "v")
    v.ingest(make_run("r1"))
    rec_path = tmp_path / "v" / "configs" / config_slug(KEY) / "records.jsonl"
    good = rec_path.read_bytes()
    with open(rec_path, "ab") as f:
        f.write(b'{"run_id": "half')
    assert [r.run_id for r in v.query(KEY)] == ["r1"]  # readers skip the tail
    Vault(tmp_path / "v")
    assert rec_path.read_bytes() == good


def test_journal_replayed_on_open(tmp_path):
    v = Vault(tmp_path / "v")
    run = make_run("r9")
    rec = v.ingest(run)
    cfg = tmp_path / "v" / "configs" / config_slug(KEY)
    line = (cfg / "records.jsonl").read_text()
    # rewind to the state just after the intent was written
    (cfg / "records.jsonl").write_text("")
    (cfg / "series" / "r9.csv").unlink()
    intent = {"slug": config_slug(KEY), "config_key": KEY, "record": json.loads(line), "csv": run.series.to_csv()}
    (tmp_path / "v" / "journal" / "r9.json").write_text(json.dumps(intent))
    (tmp_path / "v" / "journal" / "torn.json").write_text('{"slug": ')
    v2 = Vault(tmp_path / "v")
    assert v2.get("r9") == rec
    assert list((tmp_path / "v" / "journal").iterdir()) == []


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


def test_kill_after_ack_then_restart(tmp_path):
    root = str(tmp_path / "v")
    code = CHILD.format(tests=os.path.dirname(__file__), root=root)
    proc = subprocess.Popen([sys.executable, "-c", code], stdout=subprocess.PIPE, text=True)
    acks = [proc.stdout.readline().strip() for _ in range(3)]
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    assert acks == ["ack k0", "ack k1", "ack k2"]
    v = Vault(root)
    for i in range(3):
        expected = make_run(f"k{i}", started_at=f"2024-07-01T0{i}:00:00Z", link=LinkModel(40.0, 0.25, seed=i))
        got = v.get(f"k{i}")
        assert got.series == expected.series
        assert v.series_csv(f"k{i}") == expected.series.to_csv()
    first = [r.to_dict() for r in v.query(KEY)]
    assert [r.to_dict() for r in Vault(root).query(KEY)] == first


def test_concurrent_ingests(tmp_path):
    v = Vault(tmp_path / "v")
    runs = [make_run(f"c{i % 10}", started_at=f"2024-07-01T00:{i % 10:02d}:00Z") for i in range(40)]
    threads = [threading.Thread(target=v.ingest, args=(r,)) for r in runs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(r.run_id for r in v.query(KEY)) == [f"c{i}" for i in range(10)]


def test_phase_means_match_numpy(tmp_path):
    v = Vault(tmp_path / "v")
    link = LinkModel(40.0, 0.8, (InterferenceEvent(130, 170, 0.6),), seed=11)
    rec = v.ingest(make_run("r1", link=link))
    for i, p in enumerate(rec.phases):
        vals = np.array(rec.series.throughput(i))
        assert p.mean == pytest.approx(vals.mean(), abs=1e-12)
        assert p.std == pytest.approx(vals.std(ddof=1), abs=1e-12)
