"""Sequential execution of a configuration grid.

A batch spec is a YAML (or JSON) document::

    batch_id: campaign1
    base: {duration_s: 15, pretest_s: 2, ping_count: 10}
    axes:
      flows: [1, 3, 5, 7]
      server: ["10.0.0.1:5201", "10.0.0.2:5201"]
    repetitions: 3
    inter_run_gap_s: 5
    order: grid            # or "shuffled" together with "seed"
    byte_budget_bytes: null
    links:                 # optional: run over simulated links in virtual time
      "10.0.0.1:5201": {capacity_bps: 10.0e6, one_way_delay_ms: 10}

Axis names are configuration keys (including the ``flows``/``duration``
aliases) or ``tags.<name>`` for free-form grouping labels.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import os
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .clock import format_utc, utcnow
from .client import OpenConnection
from .experiment import TraceOptions, run_experiment
from .pathprobe import AsnTable, StaticProber, load_asn_db
from .records import ConfigError, MeasurementConfig, RunStatus
from .results import dumps
from .simlink import LinkModel, SimInternet, run_virtual

log = logging.getLogger(__name__)

ORDERS = ("grid", "shuffled")
TAG_PREFIX = "tags."
BATCH_REPORT = "batch.json"


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class BatchSpec:
    base: MeasurementConfig = field(default_factory=MeasurementConfig)
    axes: dict[str, list[Any]] = field(default_factory=dict)
    repetitions: int = 1
    inter_run_gap_s: float = 0.0
    order: str = "grid"
    seed: int = 0
    batch_id: str = "batch"
    byte_budget_bytes: int | None = None
    traceroute: TraceOptions = TraceOptions()
    asn_db: str | None = None
    links: dict[str, LinkModel] = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 1:
            raise BatchError("repetitions must be >= 1")
        if self.inter_run_gap_s < 0:
            raise BatchError("inter_run_gap_s must be >= 0")
        if self.order not in ORDERS:
            raise BatchError(f"order must be one of {ORDERS}, got {self.order!r}")
        accepted = MeasurementConfig.accepted_keys() - {"tags", "run_id"}
        for name, values in self.axes.items():
            if not (name in accepted or (name.startswith(TAG_PREFIX) and len(name) > len(TAG_PREFIX))):
                raise BatchError(f"unknown axis {name!r}")
            if not isinstance(values, list) or not values:
                raise BatchError(f"axis {name!r} needs a non-empty list of values")

    @property
    def total_runs(self) -> int:
        n = self.repetitions
        for values in self.axes.values():
            n *= len(values)
        return n

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> BatchSpec:
        doc = dict(doc)
        known = {"base", "axes", "repetitions", "inter_run_gap_s", "order", "seed", "batch_id",
                 "byte_budget_bytes", "traceroute", "asn_db", "links"}
        unknown = set(doc) - known
        if unknown:
            raise BatchError(f"unknown batch keys: {sorted(unknown)}")
        try:
            base = MeasurementConfig.from_dict(doc.pop("base", None) or {})
        except (ConfigError, TypeError) as exc:
            raise BatchError(f"base: {exc}") from exc
        trace = doc.pop("traceroute", True)
        if isinstance(trace, bool):
            trace = TraceOptions(enabled=trace)
        elif isinstance(trace, dict):
            trace = TraceOptions(**trace)
        links = {str(addr): LinkModel.from_dict(m) for addr, m in (doc.pop("links", None) or {}).items()}
        axes = dict(doc.pop("axes", None) or {})
        return cls(base=base, axes=axes, traceroute=trace, links=links, **doc)

    @classmethod
    def load(cls, path: str | os.PathLike) -> BatchSpec:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, dict):
            raise BatchError(f"{path}: batch spec must be a mapping")
        return cls.from_dict(doc)


_UNSAFE = re.compile(r"[^A-Za-z0-9._=-]+")


def _label(value: Any) -> str:
    return _UNSAFE.sub("_", str(value)).strip("_") or "_"


def _apply(base: MeasurementConfig, assignment: dict[str, Any], run_id: str) -> MeasurementConfig:
    tags = dict(base.tags)
    values: dict[str, Any] = {}
    for name, value in assignment.items():
        if name.startswith(TAG_PREFIX):
            tags[name[len(TAG_PREFIX):]] = str(value)
        else:
            values[name] = value
    try:
        return base.with_values(**values, tags=tags, run_id=run_id)
    except (ConfigError, TypeError) as exc:
        raise BatchError(f"{run_id}: {exc}") from exc


def expand(spec: BatchSpec) -> list[MeasurementConfig]:
    """Every axis combination times every repetition, in the spec's order.

    Grid order runs the whole grid once per repetition, so repetitions of one
    configuration are spread over the batch.
    """
    names = list(spec.axes)
    combos = list(itertools.product(*(spec.axes[n] for n in names)))
    slots = [(rep, combo) for rep in range(spec.repetitions) for combo in combos]
    if spec.order == "shuffled":
        random.Random(spec.seed).shuffle(slots)
    configs = []
    for i, (rep, combo) in enumerate(slots):
        parts = [_label(spec.batch_id), f"{i:05d}"]
        parts += [f"{_label(n)}={_label(v)}" for n, v in zip(names, combo)]
        parts.append(f"r{rep}")
        configs.append(_apply(spec.base, dict(zip(names, combo)), "-".join(parts)))
    return configs


@dataclass
class RunEntry:
    run_id: str
    status: str
    start_utc: str
    end_utc: str
    transferred_bytes: int
    series_bytes: int
    out_dir: str
    dl_rate_bps: float | None = None
    ul_rate_bps: float | None = None
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class BatchReport:
    batch_id: str
    planned_count: int
    runs: list[RunEntry] = field(default_factory=list)
    total_bytes: int = 0
    budget_exceeded: bool = False

    @property
    def status_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.runs:
            counts[r.status] = counts.get(r.status, 0) + 1
        return counts

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "batch_id": self.batch_id,
            "planned_count": self.planned_count,
            "executed_count": len(self.runs),
            "total_bytes": self.total_bytes,
            "budget_exceeded": self.budget_exceeded,
            "runs": [r.to_json() for r in self.runs],
        }


async def run_batch(
    spec: BatchSpec,
    out_root: str | os.PathLike,
    *,
    open_connection: OpenConnection | None = None,
    probers: dict[str, StaticProber] | None = None,
) -> BatchReport:
    """Run every expanded config strictly one after another.

    A failing run is recorded and the batch moves on.  When a byte budget is
    set and the tally passes it, the remaining runs are skipped.
    """
    out = Path(out_root)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BatchError(f"cannot use output directory {out}: {exc}") from exc
    configs = expand(spec)
    asn_db: AsnTable | None = load_asn_db(spec.asn_db)
    probers = probers or {}
    report = BatchReport(spec.batch_id, len(configs))
    for i, cfg in enumerate(configs):
        if i and spec.inter_run_gap_s:
            await asyncio.sleep(spec.inter_run_gap_s)
        run_dir = out / cfg.run_id
        start = utcnow()
        try:
            res = await run_experiment(
                cfg, run_dir, open_connection=open_connection, trace=spec.traceroute,
                prober=probers.get(cfg.server), asn_db=asn_db,
            )
        except Exception as exc:  # one broken run must not end the batch
            log.exception("run %s crashed", cfg.run_id)
            report.runs.append(RunEntry(cfg.run_id, RunStatus.ABORTED.value, format_utc(start), format_utc(utcnow()),
                                        0, 0, str(run_dir), error=f"{type(exc).__name__}: {exc}"))
            continue
        rec = res.record
        moved = rec.bytes_received + rec.bytes_sent
        report.total_bytes += moved
        report.runs.append(RunEntry(
            cfg.run_id, rec.status.value, format_utc(rec.start_wallclock), format_utc(rec.end_wallclock),
            moved, rec.series_bytes, str(run_dir),
            None if res.dl is None else res.dl.rate_bps, None if res.ul is None else res.ul.rate_bps,
            "; ".join(rec.errors) or None,
        ))
        log.info("run %d/%d %s: %s", i + 1, len(configs), cfg.run_id, rec.status.value)
        if spec.byte_budget_bytes is not None and report.total_bytes > spec.byte_budget_bytes:
            report.budget_exceeded = True
            log.warning("byte budget exhausted after %d runs", i + 1)
            break
    (out / BATCH_REPORT).write_text(dumps(report.to_json()), encoding="utf-8")
    return report


async def run_simulated_batch(spec: BatchSpec, out_root: str | os.PathLike) -> BatchReport:
    """Run the batch against ``spec.links``, one simulated server per address."""
    from .server import MeasurementServer, ServerConfig

    internet = SimInternet()
    probers = {}
    for address, model in sorted(spec.links.items()):
        server = MeasurementServer(ServerConfig(port=0, chunk_seed=model.seed))
        net = internet.add(address, model, server.handle)
        probers[address] = StaticProber(net.path())
    return await run_batch(spec, out_root, open_connection=internet.open_connection, probers=probers)


def execute(spec: BatchSpec, out_root: str | os.PathLike) -> BatchReport:
    """Blocking entry point: virtual time when links are given, real sockets otherwise."""
    if spec.links:
        return run_virtual(run_simulated_batch(spec, out_root))
    return asyncio.run(run_batch(spec, out_root))


def read_report(path: str | os.PathLike) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
