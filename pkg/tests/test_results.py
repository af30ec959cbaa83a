import json
import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings

from builders import golden_run, run_records, stats_logs, traces
from tcpspeed.pathprobe import TraceResult, TraceStatus
from tcpspeed.rate import compute_rate
from tcpspeed.results import (
    FILES, ResultsError, numeric_keys_without_units, read_run, safe_rate, summarize, validate, write_run,
)

GOLDEN = Path(__file__).parent / "golden"


def write_golden(tmp):
    rec, stats, trace = golden_run()
    return write_run(rec, None, stats, trace, tmp)


def test_golden_files_are_byte_stable(tmp_path):
    paths = write_golden(tmp_path)
    for name in FILES:
        assert paths[name].read_bytes() == (GOLDEN / name).read_bytes(), name


def test_golden_summary_values():
    doc = json.loads((GOLDEN / "summary.json").read_text())
    rec, _, _ = golden_run()
    assert doc["dl_rate_bps"] == compute_rate(rec.dl_series).rate_bps
    assert doc["ul_rate_bps"] == compute_rate(rec.ul_series).rate_bps
    assert doc["ping_median_ns"] == 39_900_000
    assert doc["ping_lost_count"] == 1
    assert doc["start_wallclock_utc"] == "2026-03-01T12:00:00.000000Z"


def test_files_validate_and_carry_units(tmp_path):
    paths = write_golden(tmp_path)
    for name, path in paths.items():
        doc = json.loads(path.read_text())
        validate(name, doc)
        assert numeric_keys_without_units(doc) == [], name
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]


def test_unit_rule_detects_offenders():
    assert numeric_keys_without_units({"rate": 5, "ok_bps": 1, "nested": [{"ttl": 3, "rtt": 4}], "on": True}) == [
        "/rate", "/nested/0/rtt"]


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture,
                                                                   HealthCheck.too_slow])
@given(run_records(), stats_logs(), traces())
def test_round_trip(tmp_path, rec, stats, trace):
    write_run(rec, None, stats, trace, tmp_path)
    back, summary, stats2, trace2 = read_run(tmp_path)
    assert back == rec
    assert stats2 == stats
    assert trace2 == trace
    dl = safe_rate(rec.dl_series)
    assert summary.dl_rate_bps == (dl.rate_bps if dl else None)


def test_summary_rate_reproduced_bit_for_bit(tmp_path):
    write_golden(tmp_path)
    back, summary, _, _ = read_run(tmp_path)
    assert summary.dl_rate_bps == compute_rate(back.dl_series).rate_bps
    assert summarize(back).to_json() == json.loads((tmp_path / "summary.json").read_text())


def test_traceroute_failure_is_isolated(tmp_path):
    rec, stats, _ = golden_run()
    failed = TraceResult("192.0.2.10", None, TraceStatus.FAILED, "OSError: no route", "udp", 30, [])
    write_run(rec, None, stats, failed, tmp_path / "a")
    write_run(rec, None, stats, None, tmp_path / "b")
    doc = json.loads((tmp_path / "a" / "traceroute.json").read_text())
    assert (doc["status"], doc["hops"], doc["error"]) == ("failed", [], "OSError: no route")
    assert json.loads((tmp_path / "b" / "traceroute.json").read_text())["status"] == "skipped"
    for name in ("summary.json", "flows.json", "stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (GOLDEN / name).read_bytes()


def test_non_monotone_series_names_flow_and_index(tmp_path):
    write_golden(tmp_path)
    path = tmp_path / "flows.json"
    doc = json.loads(path.read_text())
    doc["stages"]["dl"][1]["t_ns"][1] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(ResultsError, match=r"flows.json: stage dl: flow 2: t_ns\[1\]"):
        read_run(tmp_path)


def test_schema_violation_names_file_and_path(tmp_path):
    write_golden(tmp_path)
    path = tmp_path / "summary.json"
    doc = json.loads(path.read_text())
    doc["config"]["flows_dl_count"] = "three"
    path.write_text(json.dumps(doc))
    with pytest.raises(ResultsError, match="summary.json: at config/flows_dl_count"):
        read_run(tmp_path)
    write_golden(tmp_path)
    (tmp_path / "flows.json").write_text("{")
    with pytest.raises(ResultsError, match="flows.json: invalid JSON"):
        read_run(tmp_path)


def test_missing_optional_files_warn(tmp_path):
    write_golden(tmp_path)
    (tmp_path / "stats.json").unlink()
    (tmp_path / "traceroute.json").unlink()
    with pytest.warns(UserWarning) as caught:
        rec, _, stats, trace = read_run(tmp_path)
    assert sorted(str(w.message).split()[0].rsplit("/", 1)[1] for w in caught) == ["stats.json", "traceroute.json"]
    assert stats is None and trace is None and rec.config.run_id == "golden-0001"
    (tmp_path / "summary.json").unlink()
    with pytest.raises(ResultsError, match="missing"):
        read_run(tmp_path)


def test_unknown_fields_survive_round_trip(tmp_path):
    write_golden(tmp_path)
    for name in ("summary.json", "stats.json"):
        path = tmp_path / name
        doc = json.loads(path.read_text())
        doc["future_field_count"] = 7
        path.write_text(json.dumps(doc))
    rec, *_ = read_run(tmp_path)
    out = tmp_path / "again"
    _, stats, trace = golden_run()
    write_run(rec, None, stats, trace, out)
    for name in ("summary.json", "stats.json"):
        assert json.loads((out / name).read_text())["future_field_count"] == 7
    assert "future_field_count" not in json.loads((out / "flows.json").read_text())


def test_write_failure_leaves_no_partial_files(tmp_path, monkeypatch):
    rec, stats, trace = golden_run()
    calls = []

    def failing_fsync(fd):
        calls.append(fd)
        if len(calls) == 3:
            raise OSError(28, "No space left on device")

    monkeypatch.setattr(os, "fsync", failing_fsync)
    with pytest.raises(ResultsError, match="stats.json"):
        write_run(rec, None, stats, trace, tmp_path)
    assert list(tmp_path.iterdir()) == []
