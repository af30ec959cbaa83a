import math
import random
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, strategies as st

from builders import EPOCH
from tcpspeed.analysis import (
    AnalysisOptions, CurveCollection, GridMismatchError, TimeOfDayRow, analyze, collect_curves, curve_distance,
    curve_distance_detail, dominant_period_h, load_runs, median_curve, saturation_fractions, settling_time,
    timeofday_export,
)
from tcpspeed.batch import BatchSpec, execute
from tcpspeed.rate import DegenerateInputError, RateCurve, resample_curve
from tcpspeed.records import FlowSeries

STEP = 10_000_000
S = 10**9


def const(value, n=100, step=STEP):
    return RateCurve(step, [step * (i + 1) for i in range(n)], [float(value)] * n)


def curve_of(values, step=STEP):
    return RateCurve(step, [step * (i + 1) for i in range(len(values))], [float(v) for v in values])


curves_n = st.integers(1, 40).flatmap(
    lambda n: st.lists(st.lists(st.floats(0, 1e9), min_size=n, max_size=n), min_size=1, max_size=7))


def test_median_of_constants():
    assert median_curve([const(1), const(2), const(9)]).rate == [2.0] * 100
    assert median_curve([const(1), const(2), const(9), const(10)]).rate == [2.0] * 100
    single = curve_of([3, 1, 4])
    assert median_curve([single]) == single


@given(curves_n, st.randoms(use_true_random=False))
def test_median_matches_sort_oracle(rows, rng):
    curves = [curve_of(r) for r in rows]
    med = median_curve(curves)
    for i in range(len(rows[0])):
        column = sorted(r[i] for r in rows)
        assert med.rate[i] == column[(len(column) - 1) // 2]
    shuffled = list(curves)
    rng.shuffle(shuffled)
    assert median_curve(shuffled) == med
    assert median_curve([curves[0]] * 3) == curves[0]


def test_grid_mismatch():
    with pytest.raises(GridMismatchError):
        median_curve([const(1, 10), const(1, 11)])
    with pytest.raises(GridMismatchError):
        CurveCollection((), [const(1, step=STEP), const(1, step=2 * STEP)])
    with pytest.raises(GridMismatchError):
        curve_distance(const(1, 10), const(1, 12), 1.0)
    with pytest.raises(DegenerateInputError):
        median_curve([])


def saturating_series(c_bps, tau_s, end_s=15, sample_ms=1):
    """Cumulative bytes whose aggregate rate at t is C(1 - exp(-t/tau))."""
    ts, bs = [], []
    for k in range(1, int(end_s * 1000 / sample_ms) + 1):
        t = k * sample_ms * 1e-3
        ts.append(k * sample_ms * 1_000_000)
        bs.append(round(t * c_bps / 8 * (1 - math.exp(-t / tau_s))))
    return FlowSeries(1, ts, bs)


def test_saturation_fractions_closed_form():
    curve = resample_curve([saturating_series(80e6, 1.0)], STEP)
    checkpoints = [2 * S, 4 * S, 6 * S, 8 * S, 10 * S]
    got = saturation_fractions(curve, 15 * S, checkpoints)
    expect = [100 * (1 - math.exp(-t / S)) / (1 - math.exp(-15)) for t in checkpoints]
    for g, e in zip(got, expect):
        assert g == pytest.approx(e, rel=1e-3)
    assert saturation_fractions(curve, 15 * S, [15 * S]) == [100.0]
    assert saturation_fractions(curve, checkpoints_ns=[curve.horizon_ns]) == [100.0]


def test_saturation_degenerate_and_off_grid():
    with pytest.raises(DegenerateInputError):
        saturation_fractions(const(0), STEP * 100, [STEP])
    with pytest.raises(ValueError):
        saturation_fractions(const(1), STEP * 100, [STEP + 1])


@given(st.lists(st.floats(0, 1e6), min_size=5, max_size=50))
def test_fractions_monotone_for_monotone_curve(increments):
    values = np.cumsum(np.asarray(increments) + 1.0).tolist()
    curve = curve_of(values)
    pts = [curve.t_ns[i] for i in range(0, len(values), 2)]
    f = saturation_fractions(curve, checkpoints_ns=pts)
    assert f == sorted(f)


def test_settling_time():
    assert settling_time(curve_of([1, 5, 8, 9, 10]), 0.9) == 4 * STEP
    assert settling_time(curve_of([10, 1, 1, 1, 10]), 0.9) == STEP
    tau_fast = settling_time(resample_curve([saturating_series(80e6, 0.5)], STEP))
    tau_slow = settling_time(resample_curve([saturating_series(80e6, 2.0)], STEP))
    assert tau_fast < tau_slow
    assert tau_slow == pytest.approx(2.0 * math.log(10) * S, rel=0.01)


def test_distance_examples():
    r = 4e6
    assert curve_distance(const(r), const(r), r) == 0.0
    assert curve_distance(const(r), const(1.5 * r), r) == pytest.approx(50.0, rel=1e-12)
    d = curve_distance_detail(const(r), const(1.5 * r), r)
    assert d.raw_pct == pytest.approx(50.0 * math.sqrt(100), rel=1e-12) and d.points_count == 100
    with pytest.raises(DegenerateInputError):
        curve_distance(const(1), const(1), 0.0)


@given(curves_n, st.floats(1e-3, 1e9))
def test_distance_matches_direct_sum(rows, norm):
    if len(rows) < 2:
        rows = rows * 2
    a, b = curve_of(rows[0]), curve_of(rows[1])
    n = len(rows[0])
    direct = 100 * math.sqrt(sum((x - y) ** 2 for x, y in zip(rows[0], rows[1])) / n) / norm
    assert curve_distance(a, b, norm) == pytest.approx(direct, rel=1e-9, abs=1e-12)
    assert curve_distance(a, b, norm) == curve_distance(b, a, norm)
    assert (curve_distance(a, b, norm) == 0) == (rows[0] == rows[1])


@given(curves_n)
def test_triangle_inequality(rows):
    while len(rows) < 3:
        rows = rows + rows
    a, b, c = (curve_of(r) for r in rows[:3])
    ab, bc, ac = (curve_distance(x, y, 1.0) for x, y in ((a, b), (b, c), (a, c)))
    assert ac <= ab + bc + 1e-9 * max(1.0, ab + bc)


def test_timeofday_rows():
    runs = [(EPOCH + timedelta(minutes=30 * k), float(k)) for k in range(101)]
    rows = timeofday_export(runs)
    assert rows[0].relative_hour == 0 and rows[-1].relative_hour == 50
    assert [r.rate_bps for r in rows] == [float(k) for k in range(101)]
    assert timeofday_export(runs[:1]) == [TimeOfDayRow(0.0, 0.0)]
    shuffled = random.Random(3).sample(runs, len(runs))
    assert timeofday_export(shuffled) == rows


@given(st.lists(st.integers(0, 50 * 3600), min_size=1, max_size=60), st.floats(1, 600))
def test_bucket_count_bound(offsets_s, bucket_min):
    runs = [(EPOCH + timedelta(seconds=o), 1.0) for o in offsets_s]
    rows = timeofday_export(runs, bucket_min)
    span_h = (max(offsets_s) - min(offsets_s)) / 3600
    assert len(rows) <= max(1, math.ceil(span_h / (bucket_min / 60)))
    assert sum(r.runs_count for r in rows) == len(runs)
    assert [r.relative_hour for r in rows] == sorted(r.relative_hour for r in rows)


def test_dominant_period_of_sine():
    rows = [TimeOfDayRow(h / 4, 10 + 3 * math.sin(2 * math.pi * h / 4 / 24)) for h in range(4 * 50)]
    assert dominant_period_h(rows, 0.25) == pytest.approx(24, abs=0.5)
    flat = [TimeOfDayRow(h, 1.0) for h in range(10)]
    assert dominant_period_h(flat, 1.0) is None


@pytest.fixture(scope="module")
def small_campaign(tmp_path_factory):
    root = tmp_path_factory.mktemp("campaign")
    spec = BatchSpec.from_dict({
        "batch_id": "an",
        "base": {"duration_s": 2, "pretest_s": 0.3, "ping_count": 3},
        "axes": {"flows": [1, 3], "server": ["10.0.0.1:5201", "10.0.0.2:5201"]},
        "links": {"10.0.0.1:5201": {"capacity_bps": 10e6, "one_way_delay_ms": 10, "segment_bytes": 4344},
                  "10.0.0.2:5201": {"capacity_bps": 10e6, "one_way_delay_ms": 60, "segment_bytes": 4344}},
        "traceroute": False,
    })
    execute(spec, root)
    return root


def test_collect_and_exclude_short(small_campaign):
    runs = load_runs([small_campaign])
    assert len(runs) == 4
    colls = collect_curves(runs, ["flows"], horizon_ns=2 * S)
    assert [c.key for c in colls] == [(("flows", "1"),), (("flows", "3"),)]
    assert all(len(c.curves) == 2 and c.excluded_count == 0 for c in colls)
    too_long = collect_curves(runs, ["flows"], horizon_ns=60 * S)
    assert all(not c.curves and c.excluded_count == 2 for c in too_long)


def test_analyze_deterministic(small_campaign, tmp_path):
    opts = AnalysisOptions(group_by=("flows", "server"), saturation_t_ns=2 * S, checkpoints_ns=(S // 2, S),
                           compare=("server", "10.0.0.1:5201"), bucket_min=1)
    a = analyze([small_campaign], tmp_path / "a", opts)
    b = analyze([small_campaign], tmp_path / "b", opts)
    assert sorted(a) == sorted(b)
    assert set(a) >= {"saturation.csv", "distance.csv", "timeofday.csv"}
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name
    lines = a["saturation.csv"].read_text().splitlines()
    assert lines[0] == "flows,server,runs_count,excluded_count,saturation_rate_bps,settling_ns,pct_at_500_ms,pct_at_1000_ms"
    assert len(lines) == 5
    dist = a["distance.csv"].read_text().splitlines()
    assert len(dist) == 3 and all(",10.0.0.1:5201," in row for row in dist[1:])
