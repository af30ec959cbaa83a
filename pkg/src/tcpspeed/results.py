"""Writes one run as four JSON files and reads them back.

``summary.json``
    config echo, wall-clock times, status, DL/UL rates, ping median.
``flows.json``
    per-stage, per-flow ``(t_ns, cumulative_bytes)`` series and ping RTTs.
``stats.json``
    socket statistics samples per phase.
``traceroute.json``
    the path trace toward the server.

Numeric keys carry their unit as a name suffix.  All files are written to
temporary names first and renamed into place once every file is complete.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .clock import format_utc, parse_utc
from .pathprobe import TraceResult, TraceStatus, TracerouteHop
from .rate import DegenerateInputError, RateResult, compute_rate
from .records import FlowSeries, MeasurementConfig, PingResult, RunRecord, RunStatus
from .sockstats import SocketStatsSample, StatsLog

SCHEMA_VERSION = 1
FILES = ("summary.json", "flows.json", "stats.json", "traceroute.json")
UNIT_SUFFIXES = ("_ns", "_us", "_ms", "_bytes", "_bps", "_count", "_segments")
# identifiers and protocol fields that are numbers but not quantities
UNITLESS_KEYS = frozenset({"schema_version", "flow_id", "ttl", "max_ttl", "asn"})
UNKNOWN_FIELDS = "unknown_fields"

# config field -> summary key, where the field name lacks a unit
_CONFIG_KEYS = {"flows_dl": "flows_dl_count", "flows_ul": "flows_ul_count"}


class ResultsError(ValueError):
    """A result file is missing, malformed or inconsistent."""


@dataclass
class SummaryRecord:
    test_id: str
    config: dict[str, Any]
    start_wallclock_utc: str
    end_wallclock_utc: str
    status: str
    dl_rate_bps: float | None = None
    ul_rate_bps: float | None = None
    dl_t_star_ns: int | None = None
    ul_t_star_ns: int | None = None
    dl_flows_used_count: int = 0
    ul_flows_used_count: int = 0
    ping_median_ns: int | None = None
    ping_sent_count: int = 0
    ping_lost_count: int = 0
    server_address: str = ""
    resolved_address: str | None = None
    received_bytes: int = 0
    sent_bytes: int = 0
    errors: list[str] = field(default_factory=list)
    extensions: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> SummaryRecord:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def safe_rate(series: list[FlowSeries]) -> RateResult | None:
    try:
        return compute_rate(series)
    except DegenerateInputError:
        return None


def summarize(record: RunRecord, dl: RateResult | None = None, ul: RateResult | None = None) -> SummaryRecord:
    """Build the summary; missing rates are computed from the record's series."""
    dl = dl if dl is not None else safe_rate(record.dl_series)
    ul = ul if ul is not None else safe_rate(record.ul_series)
    cfg = {_CONFIG_KEYS.get(k, k): v for k, v in record.config.to_dict().items()}
    return SummaryRecord(
        test_id=record.config.run_id,
        config=cfg,
        start_wallclock_utc=format_utc(record.start_wallclock),
        end_wallclock_utc=format_utc(record.end_wallclock),
        status=record.status.value,
        dl_rate_bps=None if dl is None else dl.rate_bps,
        ul_rate_bps=None if ul is None else ul.rate_bps,
        dl_t_star_ns=None if dl is None else dl.t_star_ns,
        ul_t_star_ns=None if ul is None else ul.t_star_ns,
        dl_flows_used_count=0 if dl is None else dl.flows_used,
        ul_flows_used_count=0 if ul is None else ul.flows_used,
        ping_median_ns=record.ping.median_ns,
        ping_sent_count=len(record.ping.rtts_ns),
        ping_lost_count=record.ping.lost,
        server_address=record.config.server,
        resolved_address=record.resolved_address,
        received_bytes=record.bytes_received,
        sent_bytes=record.bytes_sent,
        errors=list(record.errors),
        extensions={k: v for k, v in record.extensions.items() if k != UNKNOWN_FIELDS},
    )


def _series_json(s: FlowSeries) -> dict[str, Any]:
    return {"flow_id": s.flow_id, "failed": s.failed, "t_ns": list(s.t_ns), "cumulative_bytes": list(s.bytes)}


def flows_json(record: RunRecord) -> dict[str, Any]:
    stages: dict[str, Any] = {name: [_series_json(s) for s in group] for name, group in record.stage_series().items()}
    stages["ping"] = {"rtts_ns": list(record.ping.rtts_ns)}
    return {"schema_version": SCHEMA_VERSION, "test_id": record.config.run_id, "stages": stages}


def stats_json(stats: StatsLog | None, test_id: str) -> dict[str, Any]:
    if stats is None:
        stats = StatsLog(0, "none")
    return {
        "schema_version": SCHEMA_VERSION,
        "test_id": test_id,
        "interval_ms": stats.interval_ms,
        "capability": stats.capability,
        "phases": {name: [dict(s.__dict__) for s in samples] for name, samples in sorted(stats.phases.items())},
        "extensions": stats.extensions,
    }


def traceroute_json(trace: TraceResult | None, test_id: str, target: str) -> dict[str, Any]:
    if trace is None:
        trace = TraceResult(target=target, status=TraceStatus.SKIPPED)
    return {
        "schema_version": SCHEMA_VERSION,
        "test_id": test_id,
        "target": trace.target,
        "target_address": trace.target_address,
        "status": trace.status,
        "error": trace.error,
        "method": trace.method,
        "max_ttl": trace.max_ttl,
        "hops": [dict(h.__dict__) for h in trace.hops],
        "extensions": trace.extensions,
    }


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_run(
    record: RunRecord,
    rates: tuple[RateResult | None, RateResult | None] | None = None,
    stats: StatsLog | None = None,
    trace: TraceResult | None = None,
    out_dir: str | os.PathLike = ".",
) -> dict[str, Path]:
    """Write the four files into ``out_dir``; returns their paths by file name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dl, ul = rates if rates is not None else (None, None)
    test_id = record.config.run_id
    docs = {
        "summary.json": summarize(record, dl, ul).to_json(),
        "flows.json": flows_json(record),
        "stats.json": stats_json(stats, test_id),
        "traceroute.json": traceroute_json(trace, test_id, record.config.host),
    }
    for name, extra in record.extensions.get(UNKNOWN_FIELDS, {}).items():
        for key, value in extra.items():
            docs[name].setdefault(key, value)

    temps: list[tuple[Path, Path]] = []
    try:
        for name, doc in docs.items():
            try:
                text = dumps(doc)
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=out)
                temps.append((Path(tmp), out / name))
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(text)
                    fh.flush()
                    os.fsync(fh.fileno())
            except (OSError, ValueError) as exc:
                raise ResultsError(f"cannot write {out / name}: {exc}") from exc
        for tmp, final in temps:
            os.replace(tmp, final)
    finally:
        for tmp, _ in temps:
            if tmp.exists():
                tmp.unlink()
    return {name: out / name for name in docs}


# reading


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict[str, Any]:
    stem = name.removesuffix(".json")
    text = resources.files("tcpspeed").joinpath("schemas", f"{stem}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(name: str, doc: Any) -> None:
    """Raise ResultsError naming the file and the JSON path of the first violation."""
    schema = load_schema(name)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ResultsError(f"{name}: at {where}: {err.message}")


def _load(path: Path) -> Any:
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ResultsError(f"{path.name}: invalid JSON: {exc}") from exc


def _unknown(name: str, doc: dict[str, Any]) -> dict[str, Any]:
    known = set(load_schema(name).get("properties", {}))
    return {k: v for k, v in doc.items() if k not in known}


def _series_from(name: str, stage: str, items: list[dict[str, Any]]) -> list[FlowSeries]:
    out = []
    for item in items:
        s = FlowSeries(item["flow_id"], list(item["t_ns"]), list(item["cumulative_bytes"]), item["failed"])
        try:
            s.check()
        except ValueError as exc:
            raise ResultsError(f"{name}: stage {stage}: {exc}") from exc
        out.append(s)
    return out


def _config_from(summary: dict[str, Any]) -> MeasurementConfig:
    inverse = {v: k for k, v in _CONFIG_KEYS.items()}
    values = {inverse.get(k, k): v for k, v in summary["config"].items()}
    try:
        return MeasurementConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ResultsError(f"summary.json: at config: {exc}") from exc


def read_stats(path: Path) -> StatsLog:
    doc = _load(path)
    validate("stats.json", doc)
    phases = {name: [SocketStatsSample(**s) for s in samples] for name, samples in doc["phases"].items()}
    return StatsLog(doc["interval_ms"], doc["capability"], phases, doc.get("extensions", {}))


def read_trace(path: Path) -> TraceResult:
    doc = _load(path)
    validate("traceroute.json", doc)
    return TraceResult(
        target=doc["target"],
        target_address=doc["target_address"],
        status=doc["status"],
        error=doc["error"],
        method=doc["method"],
        max_ttl=doc["max_ttl"],
        hops=[TracerouteHop(**h) for h in doc["hops"]],
        extensions=doc.get("extensions", {}),
    )


def read_run(run_dir: str | os.PathLike) -> tuple[RunRecord, SummaryRecord, StatsLog | None, TraceResult | None]:
    """Inverse of :func:`write_run`.

    ``summary.json`` and ``flows.json`` are required.  A missing stats or
    traceroute file gives ``None`` for that part and a warning.
    """
    d = Path(run_dir)
    docs: dict[str, Any] = {}
    for name in ("summary.json", "flows.json"):
        path = d / name
        if not path.exists():
            raise ResultsError(f"{path}: missing")
        docs[name] = _load(path)
        validate(name, docs[name])
    summary_doc, flows_doc = docs["summary.json"], docs["flows.json"]

    stats = trace = None
    if (d / "stats.json").exists():
        stats = read_stats(d / "stats.json")
        docs["stats.json"] = _load(d / "stats.json")
    else:
        warnings.warn(f"{d / 'stats.json'} missing; socket statistics unavailable", stacklevel=2)
    if (d / "traceroute.json").exists():
        trace = read_trace(d / "traceroute.json")
        docs["traceroute.json"] = _load(d / "traceroute.json")
    else:
        warnings.warn(f"{d / 'traceroute.json'} missing; path trace unavailable", stacklevel=2)

    stages = flows_doc["stages"]
    summary = SummaryRecord.from_json(summary_doc)
    extensions = dict(summary.extensions)
    unknown = {name: extra for name, doc in docs.items() if (extra := _unknown(name, doc))}
    if unknown:
        extensions[UNKNOWN_FIELDS] = unknown

    record = RunRecord(
        config=_config_from(summary_doc),
        start_wallclock=parse_utc(summary.start_wallclock_utc),
        end_wallclock=parse_utc(summary.end_wallclock_utc),
        status=RunStatus(summary.status),
        pretest_dl_series=_series_from("flows.json", "pretest_dl", stages["pretest_dl"]),
        dl_series=_series_from("flows.json", "dl", stages["dl"]),
        pretest_ul_series=_series_from("flows.json", "pretest_ul", stages["pretest_ul"]),
        ul_series=_series_from("flows.json", "ul", stages["ul"]),
        ping=PingResult(list(stages["ping"]["rtts_ns"])),
        resolved_address=summary.resolved_address,
        bytes_received=summary.received_bytes,
        bytes_sent=summary.sent_bytes,
        errors=list(summary.errors),
        extensions=extensions,
    )
    return record, summary, stats, trace


def numeric_keys_without_units(doc: Any, path: str = "") -> list[str]:
    """Paths of numeric fields whose names lack a unit suffix."""
    bad: list[str] = []
    if isinstance(doc, dict):
        for k, v in doc.items():
            p = f"{path}/{k}"
            is_number = isinstance(v, (int, float)) and not isinstance(v, bool)
            is_number_list = isinstance(v, list) and any(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
            if (is_number or is_number_list) and k not in UNITLESS_KEYS and not k.endswith(UNIT_SUFFIXES):
                bad.append(p)
            bad.extend(numeric_keys_without_units(v, p))
    elif isinstance(doc, list):
        for i, v in enumerate(doc):
            bad.extend(numeric_keys_without_units(v, f"{path}/{i}"))
    return bad
