"""Reference campaigns over simulated links, run in virtual time.

Each campaign is an ordinary batch spec that goes through the batch
runner, the result files and the analysis module, so the numbers it
reports come from the same code path as a field campaign.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .analysis import (
    Distance, TimeOfDayRow, collect_curves, curve_distance_detail, curve_median, dominant_period_h, load_runs,
    median_curve, saturation_fractions, settling_time, timeofday_export,
)
from .batch import BatchReport, BatchSpec, execute
from .experiment import TraceOptions
from .rate import DEFAULT_GRID_STEP_NS, RateCurve
from .records import MeasurementConfig, seconds_to_ns
from .simlink import LinkModel

NEAR = "10.0.0.1:5201"
FAR = "10.0.0.2:5201"

# One flow cannot fill this link; three or more flows together can.
CAPPED_LINK = LinkModel(capacity_bps=12e6, per_flow_cap_bps=3e6, one_way_delay_ms=60, delay_jitter_ms=2,
                        initial_window_segments=2, seed=1)
DISTANCE_LINK = LinkModel(capacity_bps=20e6, per_flow_cap_bps=5e6, one_way_delay_ms=10, delay_jitter_ms=1,
                          initial_window_segments=2, segment_bytes=4344, seed=2)
DIURNAL_LINK = LinkModel(capacity_bps=2e6, one_way_delay_ms=10, diurnal_period_h=24, diurnal_amplitude=0.3,
                         segment_bytes=4344, seed=3)
ACCURACY_LINK = LinkModel(capacity_bps=10e6, one_way_delay_ms=10, delay_jitter_ms=2)


def campaign_spec(batch_id: str, links: dict[str, LinkModel], axes: dict, *, duration_s: float,
                  repetitions: int = 1, gap_s: float = 5.0, **base) -> BatchSpec:
    """Batch over simulated links; UL is kept short since these campaigns study DL."""
    values = {"server": next(iter(links)), "duration_dl_s": duration_s, "duration_ul_s": 0.5,
              "pretest_s": 1, "ping_count": 10, **base}
    return BatchSpec(base=MeasurementConfig.from_dict(values), axes=axes, repetitions=repetitions,
                     inter_run_gap_s=gap_s, batch_id=batch_id, traceroute=TraceOptions(enabled=False), links=links)


def run_campaign(spec: BatchSpec, out_root: str | os.PathLike) -> BatchReport:
    report = execute(spec, out_root)
    bad = {k: v for k, v in report.status_counts.items() if k != "complete"}
    if bad:
        raise RuntimeError(f"batch {spec.batch_id}: runs not complete: {bad}")
    return report


@dataclass
class FlowCurve:
    """Median DL curve of one group and the numbers derived from it."""

    flows: int
    server: str
    curve: RateCurve
    runs_count: int
    settling_ns: int
    fraction_pct: dict[int, float] = field(default_factory=dict)

    @property
    def saturation_bps(self) -> float:
        return self.curve.rate[-1] * 8.0


def median_curves(out_root: str | os.PathLike, horizon_ns: int, checkpoints_ns: Sequence[int] = (),
                  grid_step_ns: int = DEFAULT_GRID_STEP_NS) -> list[FlowCurve]:
    """Group the runs under ``out_root`` by server and flow count and reduce each group."""
    runs = load_runs([out_root])
    out = []
    for coll in collect_curves(runs, ["server", "flows"], grid_step_ns=grid_step_ns, horizon_ns=horizon_ns):
        if not coll.curves:
            continue
        med = median_curve(coll)
        key = dict(coll.key)
        fractions = dict(zip(checkpoints_ns, saturation_fractions(med, horizon_ns, checkpoints_ns)))
        out.append(FlowCurve(int(key["flows"]), key["server"], med, len(coll.curves),
                             settling_time(med, 0.9, horizon_ns), fractions))
    return out


def flows_vs_duration(out_root: str | os.PathLike, flow_counts: Sequence[int] = (1, 3, 5, 7, 9), *,
                      repetitions: int = 3, duration_s: float = 15, link: LinkModel = CAPPED_LINK,
                      checkpoints_s: Sequence[float] = (2, 4, 6, 8, 10)) -> list[FlowCurve]:
    """How quickly the aggregate rate settles, per flow count."""
    spec = campaign_spec("flows-vs-duration", {NEAR: link}, {"flows": list(flow_counts)},
                         duration_s=duration_s, repetitions=repetitions)
    run_campaign(spec, out_root)
    checkpoints = [seconds_to_ns(s) for s in checkpoints_s]
    return sorted(median_curves(out_root, seconds_to_ns(duration_s), checkpoints), key=lambda c: c.flows)


def server_distance(out_root: str | os.PathLike, flow_counts: Sequence[int] = (3, 5, 7, 9), *,
                    repetitions: int = 2, duration_s: float = 15, link: LinkModel = DISTANCE_LINK,
                    far_delay_ms: float = 60) -> dict[int, Distance]:
    """Distance of the far server's median curve to the near one's, per flow count.

    The two links are identical apart from the one-way delay; the near
    server is the reference and its curve median the normaliser.
    """
    links = {NEAR: link, FAR: replace(link, one_way_delay_ms=far_delay_ms)}
    spec = campaign_spec("server-distance", links, {"flows": list(flow_counts), "server": [NEAR, FAR]},
                         duration_s=duration_s, repetitions=repetitions)
    run_campaign(spec, out_root)
    curves = {(c.server, c.flows): c.curve for c in median_curves(out_root, seconds_to_ns(duration_s))}
    out = {}
    for n in flow_counts:
        ref = curves[(NEAR, n)]
        out[n] = curve_distance_detail(curves[(FAR, n)], ref, curve_median(ref))
    return out


def rate_accuracy(out_root: str | os.PathLike, seeds: Sequence[int] = range(20), *, flows: int = 3,
                  duration_s: float = 15, link: LinkModel = ACCURACY_LINK) -> list[float]:
    """Summary DL rate of one run per link seed."""
    rates = []
    for seed in seeds:
        spec = campaign_spec(f"accuracy-s{seed}", {NEAR: replace(link, seed=seed)}, {}, duration_s=duration_s,
                             flows=flows)
        report = run_campaign(spec, Path(out_root) / f"seed{seed}")
        rates.append(report.runs[0].dl_rate_bps)
    return rates


@dataclass
class DiurnalResult:
    rows: list[TimeOfDayRow]
    period_h: float | None
    runs_count: int


def diurnal(out_root: str | os.PathLike, hours: float = 50, interval_min: float = 30, *,
            link: LinkModel = DIURNAL_LINK, duration_s: float = 2, bucket_min: float | None = None,
            step_h: float | None = None) -> DiurnalResult:
    """Short runs every ``interval_min`` over ``hours`` of virtual time, then the time-of-day series."""
    n = int(hours * 60 / interval_min) + 1
    spec = campaign_spec("diurnal", {NEAR: link}, {}, duration_s=duration_s, repetitions=n,
                         gap_s=interval_min * 60, flows=1, pretest_s=0.2, ping_count=2)
    run_campaign(spec, out_root)
    runs = load_runs([out_root])
    rows = timeofday_export([(r.record.start_wallclock, r.summary.dl_rate_bps) for r in runs], bucket_min)
    period = dominant_period_h(rows, step_h or interval_min / 60)
    return DiurnalResult(rows, period, len(runs))

