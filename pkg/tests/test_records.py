import pytest

from tcpspeed.records import ConfigError, FlowSeries, MeasurementConfig, PingResult, lower_median


def test_config_defaults():
    cfg = MeasurementConfig()
    assert (cfg.flows_dl, cfg.flows_ul) == (3, 3)
    assert cfg.duration_dl_ns == 15_000_000_000
    assert cfg.duration_pretest_ns == 2_000_000_000
    assert cfg.ping_count == 10
    assert cfg.stats_interval_ms == 100
    assert (cfg.host, cfg.port) == ("127.0.0.1", 5201)


def test_aliases_and_seconds():
    cfg = MeasurementConfig.from_dict({"flows": 5, "duration_s": 2.5, "pretest_s": 0.5, "server": "[::1]:80"})
    assert (cfg.flows_dl, cfg.flows_ul) == (5, 5)
    assert cfg.duration_dl_ns == cfg.duration_ul_ns == 2_500_000_000
    assert cfg.duration_pretest_ns == 500_000_000
    assert cfg.host == "::1"
    assert cfg.with_values(flows_ul=1).flows == 5


@pytest.mark.parametrize("values", [
    {"flows": 0}, {"duration_s": 0}, {"chunk_size_bytes": 10}, {"server": "nohost"},
    {"server": "h:70000"}, {"bogus": 1}, {"stats_interval_ms": 0},
])
def test_config_rejects(values):
    with pytest.raises(ConfigError):
        MeasurementConfig.from_dict(values)


def test_series_record_merges_and_clamps():
    s = FlowSeries(1)
    s.record(0, 10)
    s.record(1, 20)
    s.record(5, 30)
    assert s.samples == [(1, 20), (5, 30)]
    with pytest.raises(ValueError, match="flow 1"):
        s.record(4, 40)


def test_series_check_names_index():
    s = FlowSeries(7, [1, 3, 3], [1, 2, 3])
    with pytest.raises(ValueError, match=r"flow 7: t_ns\[2\]"):
        s.check()
    with pytest.raises(ValueError, match=r"bytes\[1\]"):
        FlowSeries(2, [1, 2], [5, 4]).check()


def test_lower_median_and_ping():
    assert lower_median([3, 1, 2]) == 2
    assert lower_median([4, 1, 3, 2]) == 2
    p = PingResult([5, None, 1, 9])
    assert (p.median_ns, p.lost, p.received) == (5, 1, [5, 1, 9])
    assert PingResult([None]).median_ns is None
