"""Configuration and measurement record types shared across the toolkit."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

from .protocol import DEFAULT_CHUNK_SIZE, MIN_CHUNK_SIZE

NS_PER_S = 1_000_000_000

STAGES = ("pretest_dl", "ping", "dl", "pretest_ul", "ul")


class ConfigError(ValueError):
    pass


def seconds_to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


@dataclass(frozen=True)
class MeasurementConfig:
    """All tunables of one measurement run.

    Durations are integer nanoseconds. ``chunk_size_bytes=None`` lets each
    flow's DL pre-test pick the DL chunk size.
    """

    server: str = "127.0.0.1:5201"
    flows_dl: int = 3
    flows_ul: int = 3
    duration_dl_ns: int = 15 * NS_PER_S
    duration_ul_ns: int = 15 * NS_PER_S
    duration_pretest_ns: int = 2 * NS_PER_S
    ping_count: int = 10
    chunk_size_bytes: int | None = DEFAULT_CHUNK_SIZE
    stats_interval_ms: int = 100
    run_id: str = "run"
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("flows_dl", "flows_ul", "ping_count", "stats_interval_ms"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("duration_dl_ns", "duration_ul_ns", "duration_pretest_ns"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.chunk_size_bytes is not None and self.chunk_size_bytes < MIN_CHUNK_SIZE:
            raise ConfigError(f"chunk_size_bytes must be >= {MIN_CHUNK_SIZE}, got {self.chunk_size_bytes}")
        host, _, port = self.server.rpartition(":")
        if not host or not port.isdigit() or not 1 <= int(port) <= 65535:
            raise ConfigError(f"server must be host:port, got {self.server!r}")

    @property
    def host(self) -> str:
        return self.server.rpartition(":")[0].strip("[]")

    @property
    def port(self) -> int:
        return int(self.server.rpartition(":")[2])

    @property
    def flows(self) -> int:
        return max(self.flows_dl, self.flows_ul)

    # aliases accepted in config documents; "flows" and "duration" set both directions
    ALIASES = {
        "flows": ("flows_dl", "flows_ul"),
        "duration_s": ("duration_dl_s", "duration_ul_s"),
        "duration": ("duration_dl_s", "duration_ul_s"),
        "pretest_s": ("duration_pretest_s",),
        "chunk": ("chunk_size_bytes",),
    }

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def accepted_keys(cls) -> set[str]:
        names = cls.field_names()
        secs = {n[:-3] + "_s" for n in names if n.endswith("_ns")}
        return names | secs | set(cls.ALIASES)

    @classmethod
    def normalize(cls, values: dict[str, Any]) -> dict[str, Any]:
        """Map alias and ``*_s`` keys onto dataclass field names."""
        out: dict[str, Any] = {}
        pending = list(values.items())
        while pending:
            key, value = pending.pop(0)
            if key in cls.ALIASES:
                pending.extend((k, value) for k in cls.ALIASES[key])
            elif key in cls.field_names():
                out[key] = value
            elif key.endswith("_s") and key[:-2] + "_ns" in cls.field_names():
                out[key[:-2] + "_ns"] = seconds_to_ns(float(value))
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        if "tags" in out:
            out["tags"] = {str(k): str(v) for k, v in dict(out["tags"]).items()}
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> MeasurementConfig:
        return cls(**cls.normalize(values))

    def with_values(self, **values: Any) -> MeasurementConfig:
        return dataclasses.replace(self, **self.normalize(values))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["tags"] = dict(sorted(self.tags.items()))
        return d


@dataclass
class FlowSeries:
    """Per-flow (time, cumulative bytes) samples relative to the common start.

    The implicit origin sample (0, 0) is not stored.
    """

    flow_id: int
    t_ns: list[int] = field(default_factory=list)
    bytes: list[int] = field(default_factory=list)
    failed: bool = False

    @property
    def m(self) -> int:
        return len(self.t_ns)

    @property
    def samples(self) -> list[tuple[int, int]]:
        return list(zip(self.t_ns, self.bytes))

    @property
    def last_t_ns(self) -> int:
        return self.t_ns[-1]

    @property
    def total_bytes(self) -> int:
        return self.bytes[-1] if self.bytes else 0

    def record(self, t_ns: int, cumulative_bytes: int) -> None:
        """Append a sample, merging samples that share a timestamp."""
        t_ns = max(t_ns, 1)
        if self.t_ns and t_ns <= self.t_ns[-1]:
            if t_ns < self.t_ns[-1]:
                raise ValueError(f"flow {self.flow_id}: time went backwards ({t_ns} < {self.t_ns[-1]})")
            self.bytes[-1] = max(self.bytes[-1], cumulative_bytes)
            return
        self.t_ns.append(t_ns)
        self.bytes.append(cumulative_bytes)

    def check(self) -> None:
        """Raise ValueError naming the first index that breaks monotonicity."""
        if len(self.t_ns) != len(self.bytes):
            raise ValueError(f"flow {self.flow_id}: {len(self.t_ns)} times vs {len(self.bytes)} byte counts")
        prev_t, prev_b = 0, 0
        for i, (t, b) in enumerate(zip(self.t_ns, self.bytes)):
            if t <= prev_t:
                raise ValueError(f"flow {self.flow_id}: t_ns[{i}]={t} not increasing")
            if b < prev_b:
                raise ValueError(f"flow {self.flow_id}: bytes[{i}]={b} decreasing")
            prev_t, prev_b = t, b


def lower_median(values):
    """Median of a non-empty sequence; lower middle value for even counts."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sequence")
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class PingResult:
    rtts_ns: list[int | None] = field(default_factory=list)

    @property
    def received(self) -> list[int]:
        return [r for r in self.rtts_ns if r is not None]

    @property
    def lost(self) -> int:
        return sum(r is None for r in self.rtts_ns)

    @property
    def median_ns(self) -> int | None:
        got = self.received
        return lower_median(got) if got else None


class RunStatus(str, enum.Enum):
    COMPLETE = "complete"
    PARTIAL_FAILURE = "partial_failure"
    ABORTED = "aborted"


@dataclass
class RunRecord:
    config: MeasurementConfig
    start_wallclock: datetime
    end_wallclock: datetime
    status: RunStatus = RunStatus.COMPLETE
    pretest_dl_series: list[FlowSeries] = field(default_factory=list)
    dl_series: list[FlowSeries] = field(default_factory=list)
    pretest_ul_series: list[FlowSeries] = field(default_factory=list)
    ul_series: list[FlowSeries] = field(default_factory=list)
    ping: PingResult = field(default_factory=PingResult)
    resolved_address: str | None = None
    bytes_received: int = 0
    bytes_sent: int = 0
    errors: list[str] = field(default_factory=list)
    extensions: dict[str, Any] = field(default_factory=dict)

    def stage_series(self) -> dict[str, list[FlowSeries]]:
        return {
            "pretest_dl": self.pretest_dl_series,
            "dl": self.dl_series,
            "pretest_ul": self.pretest_ul_series,
            "ul": self.ul_series,
        }

    @property
    def series_bytes(self) -> int:
        return sum(s.total_bytes for group in self.stage_series().values() for s in group)
