"""Per-flow transport statistics sampled from the kernel's TCP_INFO.

Where TCP_INFO is unavailable, samples keep every field ``None`` and the
module reports the missing capability instead of failing.  Simulated
streams expose the same numbers through ``get_extra_info("tcp_info")``.
"""

from __future__ import annotations

import asyncio
import socket
import struct
import sys
from dataclasses import dataclass, field

from .clock import monotonic_ns

# struct tcp_info (linux/tcp.h): 8 one-byte fields, then 32-bit counters
_U32_OFFSET = 8
_RTT, _RTTVAR, _SND_SSTHRESH, _SND_CWND, _TOTAL_RETRANS = 15, 16, 17, 18, 23
_BYTES_ACKED_OFFSET = 120
_INFINITE_SSTHRESH = 0x7FFFFFFF
_TCP_INFO_LEN = 232

TCP_INFO_SUPPORTED = sys.platform.startswith("linux") and hasattr(socket, "TCP_INFO")


@dataclass(frozen=True)
class SocketStatsSample:
    flow_id: int
    t_ns: int
    rtt_us: int | None = None
    rtt_variance_us: int | None = None
    retransmits_count: int | None = None
    slow_start_threshold_segments: int | None = None
    congestion_window_segments: int | None = None
    acked_bytes: int | None = None

    @property
    def absent(self) -> bool:
        return self.rtt_us is None and self.acked_bytes is None and self.congestion_window_segments is None


def parse_tcp_info(raw: bytes, active_open: bool = True) -> dict[str, int | None]:
    """Decode the fields we keep.  On the connecting side the kernel counts the SYN as an acked byte."""
    if len(raw) < _U32_OFFSET + 24 * 4:
        return {}
    u32 = struct.unpack_from("=24I", raw, _U32_OFFSET)
    out: dict[str, int | None] = {
        "rtt_us": u32[_RTT],
        "rtt_variance_us": u32[_RTTVAR],
        "retransmits_count": u32[_TOTAL_RETRANS],
        "slow_start_threshold_segments": None if u32[_SND_SSTHRESH] >= _INFINITE_SSTHRESH else u32[_SND_SSTHRESH],
        "congestion_window_segments": u32[_SND_CWND],
        "acked_bytes": None,
    }
    if len(raw) >= _BYTES_ACKED_OFFSET + 8:
        out["acked_bytes"] = max(0, struct.unpack_from("=Q", raw, _BYTES_ACKED_OFFSET)[0] - active_open)
    return out


# Linux value; older Pythons lack the constant
_TCP_NOTSENT_LOWAT = getattr(socket, "TCP_NOTSENT_LOWAT", 25)
UNSENT_LOWAT_BYTES = 128 * 1024


def limit_unsent(writer, lowat: int = UNSENT_LOWAT_BYTES) -> bool:
    """Cap data queued in the kernel but not yet sent, so a timed stream ends near its deadline.

    Without it the send buffer can autotune to megabytes and the final chunk
    trails the requested duration by seconds on slow paths.
    """
    sock = writer.get_extra_info("socket")
    if sock is None or not sys.platform.startswith("linux"):
        return False
    try:
        sock.setsockopt(socket.IPPROTO_TCP, _TCP_NOTSENT_LOWAT, lowat)
    except OSError:
        return False
    return True


def capability(writer) -> str:
    """'sim', 'tcp_info' or 'none' for the given stream writer."""
    if writer.get_extra_info("tcp_info") is not None:
        return "sim"
    if TCP_INFO_SUPPORTED and writer.get_extra_info("socket") is not None:
        return "tcp_info"
    return "none"


def sample_flow(writer, t_now: int, flow_id: int = 0, *, active_open: bool = True) -> SocketStatsSample:
    info = writer.get_extra_info("tcp_info")
    if info is None and TCP_INFO_SUPPORTED:
        sock = writer.get_extra_info("socket")
        if sock is not None:
            try:
                info = parse_tcp_info(sock.getsockopt(socket.IPPROTO_TCP, socket.TCP_INFO, _TCP_INFO_LEN), active_open)
            except OSError:
                info = None
    return SocketStatsSample(flow_id, t_now, **(info or {}))


async def run_sampler(writer, interval_ms: int, stop: asyncio.Event, *, flow_id: int = 0, t0_ns: int | None = None,
                      active_open: bool = True) -> list[SocketStatsSample]:
    """Sample every ``interval_ms`` on an absolute schedule until ``stop`` is set."""
    if interval_ms < 1:
        raise ValueError("interval must be >= 1 ms")
    loop = asyncio.get_running_loop()
    if t0_ns is None:
        t0_ns = monotonic_ns()
    start = loop.time()
    samples: list[SocketStatsSample] = []
    k = 0
    while not stop.is_set():
        samples.append(sample_flow(writer, monotonic_ns() - t0_ns, flow_id, active_open=active_open))
        k += 1
        delay = start + k * interval_ms / 1000 - loop.time()
        try:
            await asyncio.wait_for(stop.wait(), max(delay, 0))
        except asyncio.TimeoutError:
            pass
    return samples


@dataclass
class StatsLog:
    """Samples of every flow, grouped by phase."""

    interval_ms: int
    capability: str = "none"
    phases: dict[str, list[SocketStatsSample]] = field(default_factory=dict)
    extensions: dict = field(default_factory=dict)

    def add(self, phase: str, samples: list[SocketStatsSample]) -> None:
        self.phases.setdefault(phase, []).extend(samples)
        self.phases[phase].sort(key=lambda s: (s.flow_id, s.t_ns))
