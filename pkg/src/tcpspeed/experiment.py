"""One complete run: path trace, measurement, rate computation, result files."""

from __future__ import annotations

import asyncio
import functools
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from .client import OpenConnection, measure
from .pathprobe import AsnTable, Prober, TraceResult, annotate_asn, trace_path
from .rate import RateResult
from .records import MeasurementConfig, RunRecord
from .results import safe_rate, write_run
from .sockstats import StatsLog

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TraceOptions:
    enabled: bool = True
    max_ttl: int = 30
    probes_per_hop: int = 3
    timeout_s: float = 1.0


@dataclass
class ExperimentResult:
    record: RunRecord
    dl: RateResult | None
    ul: RateResult | None
    stats: StatsLog
    trace: TraceResult | None
    paths: dict[str, Path]


async def run_trace(host: str, options: TraceOptions, prober: Prober | None, asn_db: AsnTable | None) -> TraceResult:
    call = functools.partial(
        trace_path, host, options.max_ttl, options.probes_per_hop, options.timeout_s, prober=prober
    )
    # real probes block on sockets; keep them off the event loop
    trace = call() if prober is not None else await asyncio.get_running_loop().run_in_executor(None, call)
    trace.hops = annotate_asn(trace.hops, asn_db)
    return trace


async def run_experiment(
    config: MeasurementConfig,
    out_dir: str | os.PathLike,
    *,
    open_connection: OpenConnection | None = None,
    trace: TraceOptions = TraceOptions(),
    prober: Prober | None = None,
    asn_db: AsnTable | None = None,
) -> ExperimentResult:
    result_trace = None
    if trace.enabled:
        result_trace = await run_trace(config.host, trace, prober, asn_db)
        if result_trace.error:
            log.warning("traceroute to %s failed: %s", config.host, result_trace.error)
    stats = StatsLog(config.stats_interval_ms)
    record = await measure(config, open_connection=open_connection, stats=stats)
    dl, ul = safe_rate(record.dl_series), safe_rate(record.ul_series)
    paths = write_run(record, (dl, ul), stats, result_trace, out_dir)
    return ExperimentResult(record, dl, ul, stats, result_trace, paths)
