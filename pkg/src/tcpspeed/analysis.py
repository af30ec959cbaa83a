"""Evaluation over collections of runs.

Rate curves of many runs are grouped (by flow count, server, tags), reduced
to a pointwise median, and compared: the fraction of the final rate reached
at early checkpoints, the time to reach 90 % of it, and an RMS distance
between two median curves normalised by the median of the reference.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .rate import DEFAULT_GRID_STEP_NS, DegenerateInputError, RateCurve, RateResult, resample_curve
from .records import NS_PER_S, RunRecord, lower_median
from .results import ResultsError, SummaryRecord, read_run

DEFAULT_SATURATION_NS = 15 * NS_PER_S
DEFAULT_CHECKPOINTS_NS = tuple(s * NS_PER_S for s in (2, 4, 6, 8, 10))


class GridMismatchError(ValueError):
    pass


def _check_same_grid(curves: Sequence[RateCurve]) -> None:
    first = curves[0]
    for c in curves[1:]:
        if c.grid_step_ns != first.grid_step_ns or c.t_ns != first.t_ns:
            raise GridMismatchError(
                f"curves differ in grid: step {c.grid_step_ns} vs {first.grid_step_ns}, "
                f"{len(c)} vs {len(first)} points"
            )


@dataclass
class CurveCollection:
    key: tuple[tuple[str, str], ...]
    curves: list[RateCurve] = field(default_factory=list)
    run_ids: list[str] = field(default_factory=list)
    excluded_count: int = 0

    def __post_init__(self):
        if self.curves:
            _check_same_grid(self.curves)

    def add(self, curve: RateCurve, run_id: str = "") -> None:
        if self.curves:
            _check_same_grid([self.curves[0], curve])
        self.curves.append(curve)
        self.run_ids.append(run_id)

    @property
    def label(self) -> str:
        return "_".join(f"{k}={v}" for k, v in self.key) or "all"


def median_curve(collection: CurveCollection | Sequence[RateCurve]) -> RateCurve:
    """Pointwise median; the lower middle value for an even number of curves."""
    curves = collection.curves if isinstance(collection, CurveCollection) else list(collection)
    if not curves:
        raise DegenerateInputError("median of an empty collection")
    _check_same_grid(curves)
    values = np.sort(np.asarray([c.rate for c in curves], dtype=np.float64), axis=0)
    med = values[(len(curves) - 1) // 2]
    return RateCurve(curves[0].grid_step_ns, list(curves[0].t_ns), med.tolist())


def curve_median(curve: RateCurve) -> float:
    """Median rate over the grid points of one curve (distance normaliser)."""
    return lower_median(curve.rate)


def saturation_fractions(curve: RateCurve, saturation_t_ns: int | None = None,
                         checkpoints_ns: Iterable[int] = DEFAULT_CHECKPOINTS_NS) -> list[float]:
    """Percentage of the rate at ``saturation_t_ns`` reached at each checkpoint."""
    if saturation_t_ns is None:
        saturation_t_ns = curve.horizon_ns
    sat = curve.value_at(saturation_t_ns)
    if not sat > 0:
        raise DegenerateInputError(f"rate at saturation time {saturation_t_ns} ns is {sat}")
    return [100.0 * curve.value_at(t) / sat for t in checkpoints_ns]


def settling_time(curve: RateCurve, fraction: float = 0.9, saturation_t_ns: int | None = None) -> int:
    """First grid time at which the curve reaches ``fraction`` of its saturation rate."""
    if saturation_t_ns is None:
        saturation_t_ns = curve.horizon_ns
    sat = curve.value_at(saturation_t_ns)
    if not sat > 0:
        raise DegenerateInputError(f"rate at saturation time {saturation_t_ns} ns is {sat}")
    target = fraction * sat
    for t, r in curve.points:
        if t > saturation_t_ns:
            break
        if r >= target:
            return t
    return saturation_t_ns


@dataclass(frozen=True)
class Distance:
    rms_pct: float
    raw_pct: float
    points_count: int


def curve_distance_detail(a: RateCurve, b: RateCurve, normalizer: float) -> Distance:
    _check_same_grid([a, b])
    if not normalizer > 0:
        raise DegenerateInputError(f"normaliser must be positive, got {normalizer}")
    n = len(a)
    if n == 0:
        raise DegenerateInputError("distance between empty curves")
    norm = math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a.rate, b.rate)))
    return Distance(100.0 * norm / (normalizer * math.sqrt(n)), 100.0 * norm / normalizer, n)


def curve_distance(a: RateCurve, b: RateCurve, normalizer: float, rms: bool = True) -> float:
    """Euclidean distance in percent of ``normalizer``; per-point RMS form by default."""
    d = curve_distance_detail(a, b, normalizer)
    return d.rms_pct if rms else d.raw_pct


# time of day


@dataclass(frozen=True)
class TimeOfDayRow:
    relative_hour: float
    rate_bps: float
    runs_count: int = 1


def _rate_of(value: RateResult | float) -> float:
    return value.rate_bps if isinstance(value, RateResult) else float(value)


def timeofday_export(runs: Sequence[tuple[datetime, RateResult | float]],
                     bucket_min: float | None = None) -> list[TimeOfDayRow]:
    """Rate against hours since the first run, optionally bucketed.

    A bucket row carries the bucket start and the lower median of its runs.
    The run at the very end of the span is folded into the last bucket, so
    there are at most ``ceil(span / bucket)`` rows (one for a zero span).
    """
    if not runs:
        raise DegenerateInputError("no runs")
    ordered = sorted(runs, key=lambda r: r[0])
    t0 = ordered[0][0]
    points = [((t - t0).total_seconds() / 3600.0, _rate_of(v)) for t, v in ordered]
    if bucket_min is None:
        return [TimeOfDayRow(h, r) for h, r in points]
    if bucket_min <= 0:
        raise ValueError("bucket_min must be positive")
    bucket_h = bucket_min / 60.0
    span = points[-1][0]
    n_buckets = max(1, math.ceil(span / bucket_h))
    buckets: dict[int, list[float]] = {}
    for h, r in points:
        buckets.setdefault(min(int(h // bucket_h), n_buckets - 1), []).append(r)
    return [TimeOfDayRow(i * bucket_h, lower_median(v), len(v)) for i, v in sorted(buckets.items())]


def regular_series(rows: Sequence[TimeOfDayRow], step_h: float) -> np.ndarray:
    """Rates on a regular grid of ``step_h`` hours, gaps filled linearly."""
    hours = np.asarray([r.relative_hour for r in rows])
    rates = np.asarray([r.rate_bps for r in rows])
    grid = np.arange(0.0, hours[-1] + step_h / 2, step_h)
    return np.interp(grid, hours, rates)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Biased sample autocorrelation for lags 0..len(x)-1."""
    y = x - x.mean()
    denom = float(np.dot(y, y))
    if denom == 0:
        return np.zeros(len(x))
    full = np.correlate(y, y, mode="full")[len(y) - 1:]
    return full / denom


def dominant_period_h(rows: Sequence[TimeOfDayRow], step_h: float) -> float | None:
    """Lag of the highest autocorrelation peak after the first negative lobe."""
    acf = autocorrelation(regular_series(rows, step_h))
    negative = np.nonzero(acf < 0)[0]
    if negative.size == 0:
        return None
    start = int(negative[0])
    if start >= len(acf) - 1:
        return None
    lag = start + int(np.argmax(acf[start:]))
    return lag * step_h


# loading and grouping


@dataclass
class LoadedRun:
    path: Path
    record: RunRecord
    summary: SummaryRecord


def find_run_dirs(roots: Iterable[str | os.PathLike]) -> list[Path]:
    found = set()
    for root in roots:
        root = Path(root)
        if (root / "summary.json").exists():
            found.add(root)
        found.update(p.parent for p in root.rglob("summary.json"))
    return sorted(found)


def load_runs(roots: Iterable[str | os.PathLike]) -> list[LoadedRun]:
    runs = []
    for d in find_run_dirs(roots):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                record, summary, _, _ = read_run(d)
        except ResultsError as exc:
            warnings.warn(f"skipping {d}: {exc}", stacklevel=2)
            continue
        runs.append(LoadedRun(d, record, summary))
    return runs


def group_value(record: RunRecord, key: str, direction: str = "dl") -> str:
    cfg = record.config
    if key == "flows":
        return str(cfg.flows_dl if direction == "dl" else cfg.flows_ul)
    if key == "server":
        return cfg.server
    if key == "status":
        return record.status.value
    name = key.removeprefix("tags.").removeprefix("tag:")
    return cfg.tags.get(name, "")


def collect_curves(
    runs: Sequence[LoadedRun],
    group_by: Sequence[str],
    *,
    direction: str = "dl",
    grid_step_ns: int = DEFAULT_GRID_STEP_NS,
    horizon_ns: int = DEFAULT_SATURATION_NS,
) -> list[CurveCollection]:
    """Resample each run and group the curves; runs short of ``horizon_ns`` are excluded."""
    groups: dict[tuple, CurveCollection] = {}
    for run in sorted(runs, key=lambda r: r.record.config.run_id):
        key = tuple((k, group_value(run.record, k, direction)) for k in group_by)
        coll = groups.setdefault(key, CurveCollection(key))
        series = run.record.dl_series if direction == "dl" else run.record.ul_series
        try:
            curve = resample_curve(series, grid_step_ns, horizon_ns)
        except DegenerateInputError:
            coll.excluded_count += 1
            continue
        if curve.truncated or curve.horizon_ns < horizon_ns:
            coll.excluded_count += 1
            continue
        coll.add(curve, run.record.config.run_id)
    return [groups[k] for k in sorted(groups, key=_sort_key)]


def _sort_key(key: tuple[tuple[str, str], ...]) -> tuple:
    # numeric group values (flow counts) sort numerically
    return tuple((k, (0, int(v), "") if v.isdigit() else (1, 0, v)) for k, v in key)


# tables


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def saturation_table(collections: Sequence[CurveCollection], group_by: Sequence[str], saturation_t_ns: int,
                     checkpoints_ns: Sequence[int], fraction: float = 0.9) -> str:
    header = [*group_by, "runs_count", "excluded_count", "saturation_rate_bps", "settling_ns",
              *(f"pct_at_{t // 1_000_000}_ms" for t in checkpoints_ns)]
    rows = []
    for c in collections:
        values = [v for _, v in c.key]
        if not c.curves:
            rows.append([*values, 0, c.excluded_count, None, None, *([None] * len(checkpoints_ns))])
            continue
        med = median_curve(c)
        try:
            pct = saturation_fractions(med, saturation_t_ns, checkpoints_ns)
            settle = settling_time(med, fraction, saturation_t_ns)
        except DegenerateInputError:
            pct, settle = [None] * len(checkpoints_ns), None
        rows.append([*values, len(c.curves), c.excluded_count, med.value_at(saturation_t_ns) * 8.0, settle, *pct])
    return csv_text(header, rows)


def distance_table(collections: Sequence[CurveCollection], group_by: Sequence[str], compare_key: str,
                   reference: str) -> str:
    """Distance of every group's median curve to the group that differs only in ``compare_key = reference``."""
    if compare_key not in group_by:
        raise ValueError(f"--compare key {compare_key!r} must be one of the group-by keys {list(group_by)}")
    idx = list(group_by).index(compare_key)
    medians = {c.key: median_curve(c) for c in collections if c.curves}
    header = [*group_by, "reference", "normalizer_bps", "distance_rms_pct", "distance_raw_pct", "points_count"]
    rows = []
    for key, curve in medians.items():
        if key[idx][1] == reference:
            continue
        ref_key = tuple((k, reference if i == idx else v) for i, (k, v) in enumerate(key))
        ref = medians.get(ref_key)
        if ref is None:
            continue
        norm = curve_median(ref)
        d = curve_distance_detail(curve, ref, norm)
        rows.append([*(v for _, v in key), reference, norm * 8.0, d.rms_pct, d.raw_pct, d.points_count])
    return csv_text(header, rows)


def curve_csv(curve: RateCurve) -> str:
    return csv_text(["t_ns", "rate_bps"], ((t, r * 8.0) for t, r in curve.points))


def timeofday_table(runs: Sequence[LoadedRun], bucket_min: float | None = None, direction: str = "dl") -> str:
    items = []
    for run in runs:
        rate = run.summary.dl_rate_bps if direction == "dl" else run.summary.ul_rate_bps
        if rate is not None:
            items.append((run.record.start_wallclock, rate))
    if not items:
        return csv_text(["relative_hour", "rate_bps", "runs_count"], [])
    rows = timeofday_export(items, bucket_min)
    return csv_text(["relative_hour", "rate_bps", "runs_count"], ((r.relative_hour, r.rate_bps, r.runs_count) for r in rows))


@dataclass
class AnalysisOptions:
    group_by: tuple[str, ...] = ("flows",)
    grid_step_ns: int = DEFAULT_GRID_STEP_NS
    saturation_t_ns: int = DEFAULT_SATURATION_NS
    checkpoints_ns: tuple[int, ...] = DEFAULT_CHECKPOINTS_NS
    compare: tuple[str, str] | None = None
    bucket_min: float | None = None
    direction: str = "dl"


def analyze(inputs: Iterable[str | os.PathLike], out_dir: str | os.PathLike, opts: AnalysisOptions) -> dict[str, Path]:
    """Write saturation.csv, curves/*.csv, timeofday.csv and (with ``compare``) distance.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = load_runs(inputs)
    colls = collect_curves(runs, opts.group_by, direction=opts.direction,
                           grid_step_ns=opts.grid_step_ns, horizon_ns=opts.saturation_t_ns)
    files = {
        "saturation.csv": saturation_table(colls, opts.group_by, opts.saturation_t_ns, opts.checkpoints_ns),
        "timeofday.csv": timeofday_table(runs, opts.bucket_min, opts.direction),
    }
    if opts.compare is not None:
        files["distance.csv"] = distance_table(colls, opts.group_by, *opts.compare)
    for c in colls:
        if c.curves:
            files[f"curves/{_safe_name(c.label)}.csv"] = curve_csv(median_curve(c))
    paths = {}
    for name, text in files.items():
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        paths[name] = p
    return paths


def _safe_name(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "._=-" else "_" for ch in label)
