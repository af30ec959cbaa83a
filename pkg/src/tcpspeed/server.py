"""Measurement server: serves every phase of the protocol on each connection."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass

from . import protocol as proto
from .clock import monotonic_ns
from .protocol import ControlMessage, ErrorCode, Kind, ProtocolError
from .sockstats import limit_unsent

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    host: str = "0.0.0.0"
    port: int = 5201  # 0 picks an ephemeral port
    max_concurrent_flows: int = 64
    chunk_seed: int = 0
    accept_any_token: bool = True
    idle_timeout_s: float = 10.0

    def __post_init__(self):
        if self.max_concurrent_flows < 1:
            raise ValueError("max_concurrent_flows must be >= 1")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
        if not self.accept_any_token:
            raise ValueError("token checking is not supported")


@dataclass(frozen=True)
class UplinkReceipt:
    server_time_ns: int
    cumulative_bytes: int


class UplinkTimeout(Exception):
    pass


def _encode(kind: Kind, *args: int) -> bytes:
    return proto.serialize_message(ControlMessage(kind, args))


async def handle_uplink(reader, writer, duration_ns: int, chunk_size: int, idle_timeout_s: float = 10.0) -> list[UplinkReceipt]:
    """Receive UL chunks until the final one, acknowledging each with a receipt.

    Receipt times are measured from the call (the PUT) on the monotonic clock.
    """
    t0 = monotonic_ns()
    receipts: list[UplinkReceipt] = []
    total = 0
    while True:
        try:
            chunk = await asyncio.wait_for(reader.readexactly(chunk_size), idle_timeout_s)
        except asyncio.TimeoutError:
            raise UplinkTimeout(f"no complete chunk for {idle_timeout_s} s after {len(receipts)} receipts") from None
        total += chunk_size
        t = monotonic_ns() - t0
        if receipts and t <= receipts[-1].server_time_ns:
            t = receipts[-1].server_time_ns + 1
        receipts.append(UplinkReceipt(t, total))
        writer.write(_encode(Kind.TIME_REPORT, t, total))
        await writer.drain()
        if proto.is_final_chunk(chunk):
            return receipts


class MeasurementServer:
    """Per-connection phase state machine; keeps no state across connections."""

    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig()
        self.active = 0
        self.peak_active = 0
        self.connections = 0
        self._server: asyncio.AbstractServer | None = None

    async def handle(self, reader, writer) -> None:
        peer = writer.get_extra_info("peername")
        if self.active >= self.config.max_concurrent_flows:
            writer.write(_encode(Kind.ERR, ErrorCode.BUSY))
            await _close(writer)
            return
        limit_unsent(writer)
        self.active += 1
        self.connections += 1
        self.peak_active = max(self.peak_active, self.active)
        try:
            await self._session(reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError, OSError) as exc:
            log.info("connection %s dropped: %s", peer, exc)
        except Exception:
            log.exception("connection %s failed", peer)
        finally:
            self.active -= 1
            await _close(writer)

    async def _readline(self, reader) -> bytes:
        return await asyncio.wait_for(reader.readline(), self.config.idle_timeout_s)

    async def _session(self, reader, writer) -> None:
        chunks = proto.ChunkSource(self.config.chunk_seed)
        writer.write(proto.serialize_message(ControlMessage.greeting()))
        await writer.drain()
        while True:
            try:
                line = await self._readline(reader)
            except asyncio.TimeoutError:
                await self._fail(writer, ErrorCode.TIMEOUT, "idle timeout")
                return
            except ValueError:  # line longer than the stream limit
                await self._fail(writer, ErrorCode.PARSE, "oversized line")
                return
            if not line:
                return
            try:
                msg = proto.parse_message(line)
            except ProtocolError as exc:
                await self._fail(writer, ErrorCode.PARSE, str(exc))
                return
            try:
                done = await self._dispatch(msg, reader, writer, chunks)
            except proto.ChunkSizeError as exc:
                await self._fail(writer, ErrorCode.BAD_ARGUMENT, str(exc))
                return
            except (asyncio.TimeoutError, UplinkTimeout) as exc:
                await self._fail(writer, ErrorCode.TIMEOUT, str(exc) or "timeout")
                return
            except ProtocolError as exc:
                await self._fail(writer, ErrorCode.UNEXPECTED, str(exc))
                return
            if done:
                return

    async def _fail(self, writer, code: ErrorCode, reason: str) -> None:
        log.info("closing %s: %s", writer.get_extra_info("peername"), reason)
        writer.write(_encode(Kind.ERR, code))
        await writer.drain()

    async def _expect_ok(self, reader) -> None:
        line = await self._readline(reader)
        if not line:
            raise ConnectionResetError("peer closed before OK")
        if proto.parse_message(line).kind is not Kind.OK:
            raise ProtocolError(f"expected OK, got {line[:32]!r}")

    async def _dispatch(self, msg: ControlMessage, reader, writer, chunks: proto.ChunkSource) -> bool:
        kind = msg.kind
        if kind is Kind.PING:
            writer.write(_encode(Kind.PONG))
        elif kind is Kind.OK:
            writer.write(_encode(Kind.PING_OK))
        elif kind is Kind.GET_CHUNK:
            size = proto.check_chunk_size(msg.args[0])
            t0 = monotonic_ns()
            writer.write(chunks.chunk(size, True))
            await writer.drain()
            await self._expect_ok(reader)
            writer.write(_encode(Kind.TIME_REPORT, monotonic_ns() - t0))
        elif kind is Kind.GET_TIME:
            duration_ns, size = msg.args
            proto.check_chunk_size(size)
            t0 = monotonic_ns()
            # stream for at least the requested duration, then the final chunk
            while monotonic_ns() - t0 < duration_ns:
                writer.write(chunks.chunk(size, False))
                await writer.drain()
            writer.write(chunks.chunk(size, True))
            await writer.drain()
            elapsed = monotonic_ns() - t0
            await self._expect_ok(reader)
            writer.write(_encode(Kind.TIME_REPORT, elapsed))
        elif kind is Kind.PUT_NO_RESULT:
            size = proto.check_chunk_size(msg.args[0])
            writer.write(_encode(Kind.OK))
            await writer.drain()
            t0 = monotonic_ns()
            chunk = await asyncio.wait_for(reader.readexactly(size), self.config.idle_timeout_s)
            if not proto.is_final_chunk(chunk):
                raise ProtocolError("pre-test chunk lacks the final terminator")
            writer.write(_encode(Kind.TIME_REPORT, monotonic_ns() - t0))
        elif kind is Kind.PUT:
            duration_ns, size = msg.args
            proto.check_chunk_size(size)
            writer.write(_encode(Kind.OK))
            await writer.drain()
            await handle_uplink(reader, writer, duration_ns, size, self.config.idle_timeout_s)
        elif kind is Kind.QUIT:
            return True
        else:
            raise ProtocolError(f"unexpected {kind.value} from client")
        await writer.drain()
        return False

    async def start(self) -> asyncio.AbstractServer:
        try:
            self._server = await asyncio.start_server(self.handle, self.config.host, self.config.port)
        except OSError as exc:
            raise RuntimeError(f"cannot listen on {self.config.host}:{self.config.port}: {exc}") from exc
        return self._server

    @property
    def address(self) -> tuple[str, int]:
        return self._server.sockets[0].getsockname()[:2]

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


async def _close(writer) -> None:
    try:
        writer.close()
        await writer.wait_closed()
    except (ConnectionError, OSError):
        pass


async def serve(config: ServerConfig) -> None:
    """Listen and serve until cancelled."""
    server = MeasurementServer(config)
    srv = await server.start()
    log.info("listening on %s:%s", *server.address)
    async with srv:
        await srv.serve_forever()
