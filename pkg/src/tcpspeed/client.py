"""Measurement client: runs the five phases over ``n`` parallel flows.

Phase order is fixed: pre-test DL, ping, DL, pre-test UL, UL.  The
orchestrator joins every flow at the end of a phase and reads a single
clock value before launching the next one, so all flows of a timed phase
share relative time 0.  One connection per flow is kept for the whole run.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Awaitable, Callable

from . import protocol as proto
from .clock import monotonic_ns, utcnow
from .protocol import ControlMessage, Kind, ProtocolError
from .records import FlowSeries, MeasurementConfig, PingResult, RunRecord, RunStatus
from .sockstats import StatsLog, capability, limit_unsent, run_sampler

log = logging.getLogger(__name__)

PRETEST_MAX_CHUNK = 4 * 1024 * 1024
PING_TIMEOUT_S = 2.0
PHASE_GRACE_S = 30.0

OpenConnection = Callable[..., Awaitable[tuple]]


class PhaseError(Exception):
    """A phase could not be completed on a flow."""


class PingLossError(PhaseError):
    def __init__(self, result: PingResult):
        super().__init__(f"{result.lost} of {len(result.rtts_ns)} pings lost")
        self.result = result


class ServerError(PhaseError):
    def __init__(self, code: int):
        super().__init__(f"server replied ERR {code}")
        self.code = code


_FLOW_ERRORS = (ConnectionError, OSError, asyncio.IncompleteReadError, asyncio.TimeoutError, ProtocolError, PhaseError)


class Flow:
    """One TCP connection with byte accounting."""

    def __init__(self, flow_id: int, reader, writer):
        self.flow_id = flow_id
        self.reader = reader
        self.writer = writer
        self.bytes_in = 0
        self.bytes_out = 0
        self.failed = False
        self.error: str | None = None

    async def send(self, kind: Kind, *args: int) -> None:
        data = proto.serialize_message(ControlMessage(kind, args))
        self.writer.write(data)
        self.bytes_out += len(data)
        await self.writer.drain()

    async def recv(self) -> ControlMessage:
        line = await self.reader.readline()
        if not line:
            raise ConnectionResetError("server closed the connection")
        self.bytes_in += len(line)
        msg = proto.parse_message(line)
        if msg.kind is Kind.ERR:
            raise ServerError(msg.args[0])
        return msg

    async def expect(self, kind: Kind) -> ControlMessage:
        msg = await self.recv()
        if msg.kind is not kind:
            raise ProtocolError(f"expected {kind.value}, got {msg.kind.value}")
        return msg

    async def read_chunk(self, size: int) -> bytes:
        chunk = await self.reader.readexactly(size)
        self.bytes_in += size
        return chunk

    def write_chunk(self, chunk: bytes) -> None:
        self.writer.write(chunk)
        self.bytes_out += len(chunk)

    async def close(self) -> None:
        try:
            if not self.failed:
                await self.send(Kind.QUIT)
            self.writer.close()
            await self.writer.wait_closed()
        except _FLOW_ERRORS:
            pass


def _elapsed(t0_ns: int) -> int:
    return monotonic_ns() - t0_ns


async def run_pretest_dl(flow: Flow, duration_ns: int, *, t0_ns: int | None = None,
                         series: FlowSeries | None = None, max_chunk: int = PRETEST_MAX_CHUNK) -> int:
    """Fetch single chunks of doubling size until the duration has elapsed.

    Returns the size of the last completed chunk.
    """
    t0_ns = monotonic_ns() if t0_ns is None else t0_ns
    size, total = proto.MIN_CHUNK_SIZE, 0
    while True:
        await flow.send(Kind.GET_CHUNK, size)
        chunk = await flow.read_chunk(size)
        if not proto.is_final_chunk(chunk):
            raise ProtocolError("pre-test chunk lacks the final terminator")
        total += size
        if series is not None:
            series.record(_elapsed(t0_ns), total)
        await flow.send(Kind.OK)
        await flow.expect(Kind.TIME_REPORT)
        if _elapsed(t0_ns) >= duration_ns:
            return size
        size = min(size * 2, max_chunk)


async def run_ping(flow: Flow, count: int, *, timeout_s: float = PING_TIMEOUT_S) -> PingResult:
    """PING/PONG exchanges timed on the client; a PONG later than ``timeout_s`` counts as lost.

    After a timeout the flow resynchronises with OK/PINGOK, so a late PONG is
    never mistaken for the answer to a later PING.
    """
    result = PingResult()
    for _ in range(count):
        t = monotonic_ns()
        await flow.send(Kind.PING)
        try:
            await asyncio.wait_for(flow.expect(Kind.PONG), timeout_s)
        except asyncio.TimeoutError:
            result.rtts_ns.append(None)
            await _resync(flow, timeout_s)
            continue
        result.rtts_ns.append(monotonic_ns() - t)
    await _resync(flow, timeout_s)
    if result.lost * 2 > count:
        raise PingLossError(result)
    return result


async def _resync(flow: Flow, timeout_s: float) -> None:
    # everything up to PINGOK is a PONG still owed from the ping phase
    await flow.send(Kind.OK)
    while (msg := await asyncio.wait_for(flow.recv(), timeout_s)).kind is not Kind.PING_OK:
        if msg.kind is not Kind.PONG:
            raise ProtocolError(f"expected PONG or PINGOK, got {msg.kind.value}")


async def run_dl(flow: Flow, duration_ns: int, chunk_size: int, *, t0_ns: int, series: FlowSeries) -> int:
    """Stream chunks until the final one; returns the server's stream duration."""
    await flow.send(Kind.GET_TIME, duration_ns, chunk_size)
    total = 0
    while True:
        chunk = await flow.read_chunk(chunk_size)
        total += chunk_size
        series.record(_elapsed(t0_ns), total)
        if proto.is_final_chunk(chunk):
            break
    await flow.send(Kind.OK)
    msg = await flow.expect(Kind.TIME_REPORT)
    return msg.args[0]


async def run_pretest_ul(flow: Flow, duration_ns: int, *, t0_ns: int | None = None,
                         series: FlowSeries | None = None, max_chunk: int = PRETEST_MAX_CHUNK) -> int:
    t0_ns = monotonic_ns() if t0_ns is None else t0_ns
    source = proto.ChunkSource(flow.flow_id)
    size, total = proto.MIN_CHUNK_SIZE, 0
    while True:
        await flow.send(Kind.PUT_NO_RESULT, size)
        await flow.expect(Kind.OK)
        flow.write_chunk(source.chunk(size, True))
        await flow.writer.drain()
        await flow.expect(Kind.TIME_REPORT)
        total += size
        if series is not None:
            series.record(_elapsed(t0_ns), total)
        if _elapsed(t0_ns) >= duration_ns:
            return size
        size = min(size * 2, max_chunk)


async def run_ul(flow: Flow, duration_ns: int, chunk_size: int, *, t0_ns: int, series: FlowSeries) -> int:
    """Send chunks for the duration; the series holds the server's receipts."""
    await flow.send(Kind.PUT, duration_ns, chunk_size)
    await flow.expect(Kind.OK)
    source = proto.ChunkSource(flow.flow_id)
    sent: list[int | None] = [None]

    async def sender():
        total = 0
        while _elapsed(t0_ns) < duration_ns:
            flow.write_chunk(source.chunk(chunk_size, False))
            total += chunk_size
            await flow.writer.drain()
        flow.write_chunk(source.chunk(chunk_size, True))
        sent[0] = total + chunk_size
        await flow.writer.drain()

    async def receipts():
        while True:
            msg = await flow.expect(Kind.TIME_REPORT)
            if len(msg.args) != 2:
                raise ProtocolError("UL receipt without byte count")
            t, cumulative = msg.args
            series.record(t, cumulative)
            if sent[0] is not None and cumulative >= sent[0]:
                return

    send_task = asyncio.ensure_future(sender())
    try:
        await receipts()
        await send_task
    finally:
        if not send_task.done():
            send_task.cancel()
    return sent[0]


class _Run:
    def __init__(self, config: MeasurementConfig, record: RunRecord, stats: StatsLog | None):
        self.config = config
        self.record = record
        self.stats = stats
        self.flows: list[Flow] = []

    def fail(self, flow: Flow, phase: str, exc: BaseException) -> None:
        flow.failed = True
        flow.error = f"{phase}: flow {flow.flow_id}: {type(exc).__name__}: {exc}"
        self.record.errors.append(flow.error)
        log.warning(flow.error)

    async def phase(self, name: str, flows: list[Flow], make, *, sample: bool = False, timeout_s: float) -> dict:
        """Run ``make(flow, t0_ns)`` on every live flow from a common start."""
        live = [f for f in flows if not f.failed]
        t0 = monotonic_ns()
        stop = asyncio.Event()
        samplers = []
        if sample and self.stats is not None:
            samplers = [
                asyncio.ensure_future(run_sampler(f.writer, self.config.stats_interval_ms, stop, flow_id=f.flow_id, t0_ns=t0))
                for f in live
            ]
        results = await asyncio.gather(
            *(asyncio.wait_for(make(f, t0), timeout_s) for f in live), return_exceptions=True
        )
        stop.set()
        for s in samplers:
            self.stats.add(name, await s)
        out = {}
        for f, res in zip(live, results):
            if isinstance(res, _FLOW_ERRORS):
                self.fail(f, name, res)
            elif isinstance(res, BaseException):
                raise res
            else:
                out[f.flow_id] = res
        return out


async def measure(config: MeasurementConfig, *, open_connection: OpenConnection | None = None,
                  stats: StatsLog | None = None) -> RunRecord:
    """Execute one run and return its record; never raises for network failures."""
    open_connection = open_connection or asyncio.open_connection
    start = utcnow()
    record = RunRecord(config, start, start)
    run = _Run(config, record, stats)
    try:
        await _connect(run, open_connection)
    except _FLOW_ERRORS as exc:
        record.status = RunStatus.ABORTED
        record.errors.append(f"connect: {type(exc).__name__}: {exc}")
        record.end_wallclock = utcnow()
        return record
    try:
        await _phases(run)
    finally:
        for f in run.flows:
            record.bytes_received += f.bytes_in
            record.bytes_sent += f.bytes_out
        await asyncio.gather(*(f.close() for f in run.flows))
        record.end_wallclock = utcnow()
    return record


async def _connect(run: _Run, open_connection: OpenConnection) -> None:
    cfg = run.config
    results = await asyncio.gather(
        *(open_connection(cfg.host, cfg.port) for _ in range(cfg.flows)), return_exceptions=True
    )
    errors = [r for r in results if isinstance(r, BaseException)]
    pairs = [r for r in results if not isinstance(r, BaseException)]
    run.flows = [Flow(i + 1, r, w) for i, (r, w) in enumerate(pairs)]
    for f in run.flows:
        limit_unsent(f.writer)
    if errors:
        for f in run.flows:
            f.writer.close()
        run.flows = []
        raise errors[0]
    peer = run.flows[0].writer.get_extra_info("peername")
    if peer:
        run.record.resolved_address = f"{peer[0]}:{peer[1]}"
    if run.stats is not None:
        run.stats.capability = capability(run.flows[0].writer)
    greetings = await asyncio.gather(
        *(asyncio.wait_for(f.expect(Kind.GREETING), PHASE_GRACE_S) for f in run.flows), return_exceptions=True
    )
    for g in greetings:
        if isinstance(g, BaseException):
            raise g
        if g.args[0] != proto.PROTOCOL_VERSION:
            raise ProtocolError(f"server speaks protocol version {g.args[0]}")


async def _phases(run: _Run) -> None:
    cfg, rec = run.config, run.record
    dl_flows = run.flows[: cfg.flows_dl]
    ul_flows = run.flows[: cfg.flows_ul]
    pretest_timeout = cfg.duration_pretest_ns / 1e9 + PHASE_GRACE_S

    rec.pretest_dl_series = [FlowSeries(f.flow_id) for f in dl_flows]
    pre = {s.flow_id: s for s in rec.pretest_dl_series}
    dl_sizes = await run.phase(
        "pretest_dl", dl_flows,
        lambda f, t0: run_pretest_dl(f, cfg.duration_pretest_ns, t0_ns=t0, series=pre[f.flow_id]),
        timeout_s=pretest_timeout,
    )
    _flag_failed(rec.pretest_dl_series, dl_flows)

    pinger = next((f for f in dl_flows if not f.failed), None)
    ping_failed = False
    if pinger is not None:
        try:
            rec.ping = await run_ping(pinger, cfg.ping_count)
        except PingLossError as exc:
            # too many lost pings fail the phase, not the flow
            rec.ping = exc.result
            rec.errors.append(f"ping: {exc}")
            ping_failed = True
        except _FLOW_ERRORS as exc:
            run.fail(pinger, "ping", exc)

    rec.dl_series = [FlowSeries(f.flow_id) for f in dl_flows]
    dl = {s.flow_id: s for s in rec.dl_series}
    await run.phase(
        "dl", dl_flows,
        lambda f, t0: run_dl(f, cfg.duration_dl_ns, cfg.chunk_size_bytes or dl_sizes[f.flow_id], t0_ns=t0, series=dl[f.flow_id]),
        sample=True, timeout_s=cfg.duration_dl_ns / 1e9 + PHASE_GRACE_S,
    )
    _flag_failed(rec.dl_series, dl_flows)

    rec.pretest_ul_series = [FlowSeries(f.flow_id) for f in ul_flows]
    pre_ul = {s.flow_id: s for s in rec.pretest_ul_series}
    ul_sizes = await run.phase(
        "pretest_ul", ul_flows,
        lambda f, t0: run_pretest_ul(f, cfg.duration_pretest_ns, t0_ns=t0, series=pre_ul[f.flow_id]),
        timeout_s=pretest_timeout,
    )
    _flag_failed(rec.pretest_ul_series, ul_flows)

    rec.ul_series = [FlowSeries(f.flow_id) for f in ul_flows]
    ul = {s.flow_id: s for s in rec.ul_series}
    await run.phase(
        "ul", ul_flows,
        lambda f, t0: run_ul(f, cfg.duration_ul_ns, cfg.chunk_size_bytes or ul_sizes[f.flow_id], t0_ns=t0, series=ul[f.flow_id]),
        sample=True, timeout_s=cfg.duration_ul_ns / 1e9 + PHASE_GRACE_S,
    )
    _flag_failed(rec.ul_series, ul_flows)

    for group in rec.stage_series().values():
        for s in group:
            s.check()
    if all(f.failed for f in run.flows):
        rec.status = RunStatus.ABORTED
    elif ping_failed or any(f.failed for f in run.flows):
        rec.status = RunStatus.PARTIAL_FAILURE


def _flag_failed(series: list[FlowSeries], flows: list[Flow]) -> None:
    failed = {f.flow_id for f in flows if f.failed}
    for s in series:
        if s.flow_id in failed:
            s.failed = True


def run_measurement(config: MeasurementConfig, **kwargs) -> RunRecord:
    """Blocking wrapper around :func:`measure` for real sockets."""
    return asyncio.run(measure(config, **kwargs))
