"""Aggregate data rate over parallel flows.

Each flow contributes samples ``(t_i, b_i)``, the cumulative bytes received
by relative time ``t_i``, with an implicit origin ``(0, 0)``.  The common
horizon ``t*`` is the earliest final sample time over all flows; each flow's
byte count at ``t*`` is linearly interpolated between the two samples that
bracket it, and the reported rate is the summed byte count divided by
``t*``.  Slow start is part of the series and is not cut out.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .records import NS_PER_S, FlowSeries

DEFAULT_GRID_STEP_NS = 10_000_000


class DegenerateInputError(ValueError):
    """Raised when the series cannot produce a rate (empty flows, zero horizon)."""


@dataclass(frozen=True)
class RateResult:
    t_star_ns: int
    per_flow_bytes: dict[int, float]
    rate: float  # bytes per second
    flows_used: int
    excluded_flows: tuple[int, ...] = ()

    @property
    def rate_bps(self) -> float:
        return self.rate * 8.0

    @property
    def total_bytes(self) -> float:
        return math.fsum(self.per_flow_bytes.values())


@dataclass
class RateCurve:
    grid_step_ns: int
    t_ns: list[int] = field(default_factory=list)
    rate: list[float] = field(default_factory=list)  # bytes per second
    truncated: bool = False

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.t_ns, self.rate))

    @property
    def horizon_ns(self) -> int:
        return self.t_ns[-1] if self.t_ns else 0

    def __len__(self) -> int:
        return len(self.t_ns)

    def value_at(self, t_ns: int) -> float:
        i = bisect.bisect_left(self.t_ns, t_ns)
        if i == len(self.t_ns) or self.t_ns[i] != t_ns:
            raise ValueError(f"{t_ns} ns is not a grid point of this curve")
        return self.rate[i]


def usable_series(series: list[FlowSeries], strict: bool = False) -> tuple[list[FlowSeries], tuple[int, ...]]:
    """Split off empty or failed flows, which would otherwise drag ``t*`` towards 0."""
    keep, dropped = [], []
    for s in series:
        if s.m == 0 or s.failed:
            if strict:
                raise DegenerateInputError(f"flow {s.flow_id} is {'failed' if s.failed else 'empty'}")
            dropped.append(s.flow_id)
        else:
            keep.append(s)
    return keep, tuple(dropped)


def compute_t_star(series: list[FlowSeries]) -> int:
    if not series:
        raise DegenerateInputError("no flows")
    for s in series:
        if s.m == 0:
            raise DegenerateInputError(f"flow {s.flow_id} has no samples")
    return min(s.t_ns[-1] for s in series)


def interpolate_bytes(series: FlowSeries, t_star: int) -> float:
    """Bytes received on one flow by ``t_star``, interpolated between samples."""
    if not 0 < t_star <= series.t_ns[-1]:
        raise ValueError(f"t*={t_star} outside (0, {series.t_ns[-1]}] for flow {series.flow_id}")
    i = bisect.bisect_left(series.t_ns, t_star)  # first sample with t >= t*
    t1, b1 = series.t_ns[i], series.bytes[i]
    t0, b0 = (series.t_ns[i - 1], series.bytes[i - 1]) if i > 0 else (0, 0)
    return b0 + (t_star - t0) / (t1 - t0) * (b1 - b0)


def compute_rate(series: list[FlowSeries], t_star: int | None = None, *, strict: bool = False) -> RateResult:
    used, excluded = usable_series(series, strict)
    horizon = compute_t_star(used)
    if t_star is None:
        t_star = horizon
    elif t_star > horizon:
        raise ValueError(f"t*={t_star} beyond the common horizon {horizon}")
    if t_star <= 0:
        raise DegenerateInputError("t* must be positive")
    per_flow = {s.flow_id: interpolate_bytes(s, t_star) for s in used}
    # fsum keeps the total independent of flow order
    rate = math.fsum(per_flow.values()) / (t_star / NS_PER_S)
    return RateResult(t_star, per_flow, rate, len(used), excluded)


def resample_curve(
    series: list[FlowSeries],
    grid_step: int = DEFAULT_GRID_STEP_NS,
    horizon: int | None = None,
    *,
    strict: bool = False,
) -> RateCurve:
    """Evaluate the aggregate rate at ``grid_step, 2*grid_step, ...`` up to ``horizon``.

    A horizon beyond ``t*`` is cut back to ``t*`` and flagged as truncated.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    used, _ = usable_series(series, strict)
    t_star = compute_t_star(used)
    truncated = False
    if horizon is None:
        horizon = t_star
    elif horizon > t_star:
        horizon, truncated = t_star, True
    grid = np.arange(1, horizon // grid_step + 1, dtype=np.int64) * grid_step
    if grid.size == 0:
        return RateCurve(grid_step, [], [], truncated)

    # same operation order as interpolate_bytes, so grid values match it exactly
    per_flow = []
    g = grid.astype(np.float64)
    for s in used:
        t = np.asarray([0, *s.t_ns], dtype=np.int64)
        b = np.asarray([0, *s.bytes], dtype=np.float64)
        i = np.searchsorted(t, grid, side="left")
        t0, t1 = t[i - 1].astype(np.float64), t[i].astype(np.float64)
        b0, b1 = b[i - 1], b[i]
        per_flow.append(b0 + (g - t0) / (t1 - t0) * (b1 - b0))
    columns = np.stack(per_flow, axis=1)
    rates = [math.fsum(row) / (int(tg) / NS_PER_S) for row, tg in zip(columns.tolist(), grid.tolist())]
    return RateCurve(grid_step, grid.tolist(), rates, truncated)
