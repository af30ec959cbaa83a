import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from tcpspeed.batch import BatchError, BatchSpec, execute, expand, read_report, run_simulated_batch
from tcpspeed.clock import parse_utc
from tcpspeed.records import MeasurementConfig
from tcpspeed.results import read_run
from tcpspeed.simlink import LinkModel, run_virtual

FIXTURE = Path(__file__).parent / "fixtures" / "campaign.yaml"
A, B = "10.0.0.1:5201", "10.0.0.2:5201"
FAST = LinkModel(10e6, one_way_delay_ms=5, segment_bytes=4344)
BASE = MeasurementConfig.from_dict({"server": A, "duration_s": 1, "pretest_s": 0.3, "ping_count": 3, "flows": 2})


def test_product_counts():
    spec = BatchSpec(axes={"flows": [1, 3]}, repetitions=2)
    configs = expand(spec)
    assert spec.total_runs == len(configs) == 4
    assert [c.flows for c in configs] == [1, 3, 1, 3]
    assert len({c.run_id for c in configs}) == 4
    assert configs[3].run_id == "batch-00003-flows=3-r1"


def test_empty_axes_is_base_config():
    base = MeasurementConfig(flows_dl=5, flows_ul=2, run_id="ignored")
    (cfg,) = expand(BatchSpec(base=base))
    assert cfg.with_values(run_id=base.run_id) == base


def test_campaign_grid():
    spec = BatchSpec.load(FIXTURE)
    configs = expand(spec)
    assert len(configs) == 8
    assert sorted((c.flows, c.server) for c in configs) == sorted((f, s) for f in (1, 3, 5, 7) for s in (A, B))
    assert spec.links[B].one_way_delay_ms == 60 and spec.traceroute.max_ttl == 8


@pytest.mark.parametrize("doc, msg", [
    ({"axes": {"speed": [1]}}, "unknown axis"),
    ({"axes": {"flows": []}}, "non-empty"),
    ({"axes": {"flows": 3}}, "non-empty"),
    ({"order": "random"}, "order"),
    ({"repetitions": 0}, "repetitions"),
    ({"servers": []}, "unknown batch keys"),
    ({"base": {"flows": 0}}, "base"),
])
def test_spec_validation(doc, msg):
    with pytest.raises(BatchError, match=msg):
        BatchSpec.from_dict(doc)


def test_bad_axis_value_names_run():
    with pytest.raises(BatchError, match="flows=0"):
        expand(BatchSpec(axes={"flows": [1, 0]}))


@given(st.integers(0, 2**32), st.integers(1, 3))
def test_expansion_deterministic(seed, reps):
    spec = BatchSpec(axes={"flows": [1, 3, 5], "tags.site": ["x", "y"]}, repetitions=reps, order="shuffled", seed=seed)
    a, b = expand(spec), expand(spec)
    assert a == b
    grid = expand(BatchSpec(axes=spec.axes, repetitions=reps))
    key = lambda c: (c.flows, c.tags["site"])  # noqa: E731
    assert sorted(map(key, a)) == sorted(map(key, grid))


def test_shuffle_depends_on_seed():
    axes = {"flows": list(range(1, 10))}
    orders = {tuple(c.flows for c in expand(BatchSpec(axes=axes, order="shuffled", seed=s))) for s in range(5)}
    assert len(orders) > 1


def run_sim(tmp_path, **kw):
    spec = BatchSpec(base=BASE, links={A: FAST}, batch_id="t", **kw)
    return run_virtual(run_simulated_batch(spec, tmp_path))


def test_down_server_is_isolated(tmp_path):
    report = run_sim(tmp_path, axes={"server": [A, A, "10.9.9.9:5201", A]})
    assert [r.status for r in report.runs] == ["complete", "complete", "aborted", "complete"]
    assert report.status_counts == {"complete": 3, "aborted": 1}
    assert "connect" in report.runs[2].error
    doc = read_report(tmp_path / "batch.json")
    assert doc["executed_count"] == 4 and doc["planned_count"] == 4


def test_gap_no_overlap_and_accounting(tmp_path):
    report = run_sim(tmp_path, axes={"flows": [1, 3]}, repetitions=2, inter_run_gap_s=5)
    starts = [parse_utc(r.start_utc) for r in report.runs]
    ends = [parse_utc(r.end_utc) for r in report.runs]
    for i in range(len(starts) - 1):
        assert ends[i] <= starts[i + 1]
        assert (starts[i + 1] - starts[i]).total_seconds() >= 5
    for r in report.runs:
        assert r.transferred_bytes >= r.series_bytes > 0
        rec, *_ = read_run(r.out_dir)
        assert rec.config.run_id == r.run_id
        assert json.loads((Path(r.out_dir) / "traceroute.json").read_text())["status"] == "reached"
    assert report.total_bytes == sum(r.transferred_bytes for r in report.runs)


def test_byte_budget_stops_batch(tmp_path):
    report = run_sim(tmp_path, axes={"flows": [1, 2, 3]}, byte_budget_bytes=1)
    assert report.budget_exceeded and len(report.runs) == 1 and report.planned_count == 3


def test_execute_fixture_end_to_end(tmp_path):
    spec = BatchSpec.load(FIXTURE)
    report = execute(spec, tmp_path)
    assert report.status_counts == {"complete": 8}
    assert len(list(tmp_path.glob("*/summary.json"))) == 8


def test_unusable_out_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(BatchError, match="cannot use"):
        run_sim(blocker / "sub", axes={"flows": [1]})
