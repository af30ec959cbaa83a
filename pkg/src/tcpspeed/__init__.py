"""Multi-flow TCP speed measurement: server, client, rate engine, analysis and a link emulator."""

from .rate import RateCurve, RateResult, compute_rate, compute_t_star, interpolate_bytes, resample_curve
from .records import FlowSeries, MeasurementConfig, PingResult, RunRecord, RunStatus

__version__ = "0.1.0"

__all__ = [
    "FlowSeries",
    "MeasurementConfig",
    "PingResult",
    "RateCurve",
    "RateResult",
    "RunRecord",
    "RunStatus",
    "compute_rate",
    "compute_t_star",
    "interpolate_bytes",
    "resample_curve",
]
