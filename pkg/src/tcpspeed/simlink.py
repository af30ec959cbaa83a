"""Deterministic in-process network emulation.

A :class:`SimNetwork` hands out stream endpoints that look like asyncio's
``(StreamReader, StreamWriter)`` pairs, so the measurement client and
server run over it unchanged.  Each direction of the link is a shared
token bucket (optionally modulated by a daily sine), each flow may have its
own token-bucket cap, and every connection carries a small TCP-like sender:
a congestion window that starts at the initial window, grows by the acked
bytes in slow start, restarts after an application-limited period of at
least one RTO and is halved on loss.

Everything is driven by ``loop.time()`` and ``loop.call_at``.  Under
:class:`VirtualTimeLoop` time jumps straight to the next event, so a 15 s
transfer costs only the CPU time of its events; on a normal loop the same
code shapes in real time (see :class:`ShapingProxy`).
"""

from __future__ import annotations

import asyncio
import math
import random
import selectors
import socket
from collections import deque
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from typing import Any, Awaitable, Callable

DEFAULT_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class LinkModel:
    capacity_bps: float
    per_flow_cap_bps: float | None = None
    one_way_delay_ms: float = 10.0
    delay_jitter_ms: float = 0.0
    loss_rate: float = 0.0
    diurnal_period_h: float | None = None
    diurnal_amplitude: float = 0.0
    seed: int = 0
    segment_bytes: int = 1448
    initial_window_segments: int = 10
    max_window_bytes: int = 256 * 1024
    send_buffer_bytes: int = 64 * 1024
    burst_bytes: int | None = None
    min_rto_ms: float = 200.0

    def __post_init__(self):
        if self.capacity_bps <= 0:
            raise ValueError("capacity_bps must be positive")
        if self.per_flow_cap_bps is not None and self.per_flow_cap_bps <= 0:
            raise ValueError("per_flow_cap_bps must be positive")
        if not 0 <= self.loss_rate < 1:
            raise ValueError("loss_rate must be in [0, 1)")
        if not 0 <= self.diurnal_amplitude < 1:
            raise ValueError("diurnal_amplitude must be in [0, 1)")
        if self.diurnal_period_h is not None and self.diurnal_period_h <= 0:
            raise ValueError("diurnal_period_h must be positive")
        if self.one_way_delay_ms < 0 or self.delay_jitter_ms < 0:
            raise ValueError("delays must be non-negative")
        if self.segment_bytes < 1 or self.initial_window_segments < 1:
            raise ValueError("segment_bytes and initial_window_segments must be >= 1")

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> LinkModel:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown link model keys: {sorted(unknown)}")
        ints = {"seed", "segment_bytes", "initial_window_segments", "max_window_bytes", "send_buffer_bytes", "burst_bytes"}
        out = {}
        for k, v in values.items():
            # YAML 1.1 reads "10.0e6" as a string
            if isinstance(v, str):
                v = float(v)
            out[k] = v if v is None else (int(v) if k in ints else float(v))
        return cls(**out)

    @property
    def delay_s(self) -> float:
        return self.one_way_delay_ms / 1000.0

    @property
    def bucket_depth(self) -> float:
        return float(self.burst_bytes or 2 * self.segment_bytes)

    @property
    def rto_s(self) -> float:
        return max(self.min_rto_ms / 1000.0, 3 * 2 * self.delay_s)


def capacity_at(model: LinkModel, t_ns: float) -> float:
    """Instantaneous shared capacity in bit/s at ``t_ns`` after the link origin."""
    if not model.diurnal_period_h or not model.diurnal_amplitude:
        return model.capacity_bps
    period_ns = model.diurnal_period_h * 3600e9
    return model.capacity_bps * (1 + model.diurnal_amplitude * math.sin(2 * math.pi * t_ns / period_ns))


def capacity_volume_bytes(model: LinkModel, t0_ns: float, t1_ns: float) -> float:
    """Bytes the shared capacity allows over ``[t0_ns, t1_ns]``."""
    dt_s = (t1_ns - t0_ns) / 1e9
    if not model.diurnal_period_h or not model.diurnal_amplitude:
        return model.capacity_bps * dt_s / 8
    period_ns = model.diurnal_period_h * 3600e9
    w = 2 * math.pi / period_ns
    # closed-form integral of the sine-modulated rate
    wave = model.diurnal_amplitude * (math.cos(w * t0_ns) - math.cos(w * t1_ns)) / w / 1e9
    return model.capacity_bps * (dt_s + wave) / 8


@dataclass(frozen=True)
class LinkState:
    t_ns: int = 0
    tokens: float = 0.0  # bytes currently in the shared bucket


def advance_virtual_time(model: LinkModel, state: LinkState, dt_ns: int) -> LinkState:
    if dt_ns < 0:
        raise ValueError("dt must be non-negative")
    if dt_ns == 0:
        return state
    t1 = state.t_ns + dt_ns
    tokens = min(model.bucket_depth, state.tokens + capacity_volume_bytes(model, state.t_ns, t1))
    return LinkState(t1, tokens)


# --------------------------------------------------------------------------
# virtual time


class _VirtualSelector(selectors.DefaultSelector):
    def __init__(self):
        super().__init__()
        self.now = 0.0

    def select(self, timeout=None):
        ready = super().select(0)
        if ready:
            return ready
        if timeout is None:
            # only another thread could still wake us up
            ready = super().select(1.0)
            if not ready:
                raise RuntimeError("virtual time deadlock: no timers and no ready I/O")
            return ready
        if timeout > 0:
            self.now += timeout
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop whose clock jumps to the next scheduled timer."""

    def __init__(self, epoch: datetime = DEFAULT_EPOCH):
        self._vselector = _VirtualSelector()
        super().__init__(selector=self._vselector)
        self.virtual_epoch = epoch

    def time(self) -> float:
        return self._vselector.now


def run_virtual(main: Awaitable, *, epoch: datetime = DEFAULT_EPOCH):
    """Run a coroutine to completion on a fresh :class:`VirtualTimeLoop`."""
    loop = VirtualTimeLoop(epoch)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main)
    finally:
        pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
        for t in pending:
            t.cancel()
        if pending:
            loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        loop.run_until_complete(loop.shutdown_asyncgens())
        asyncio.set_event_loop(None)
        loop.close()


# --------------------------------------------------------------------------
# shaping


class _Bucket:
    def __init__(self, depth: float, rate_bps: float | None = None, model: LinkModel | None = None, origin: float = 0.0):
        self.depth = depth
        self.tokens = depth
        self.rate_bps = rate_bps
        self.model = model
        self.origin = origin
        self.t = origin

    def refill(self, now: float) -> None:
        if now <= self.t:
            return
        if self.model is not None:
            vol = capacity_volume_bytes(self.model, (self.t - self.origin) * 1e9, (now - self.origin) * 1e9)
        else:
            vol = self.rate_bps * (now - self.t) / 8
        self.tokens = min(self.depth, self.tokens + vol)
        self.t = now

    def wait(self, need: float) -> float:
        missing = need - self.tokens
        if missing <= 1e-9:
            return 0.0
        if self.model is not None:
            rate = capacity_at(self.model, (self.t - self.origin) * 1e9)
        else:
            rate = self.rate_bps
        return max(missing * 8 / rate, 1e-9)

    def take(self, n: float) -> None:
        self.tokens -= n


class _Link:
    """One direction of the shared link: round-robin over flows with queued segments."""

    def __init__(self, net: SimNetwork):
        self.net = net
        self.loop = net.loop
        self.bucket = _Bucket(net.model.bucket_depth, model=net.model, origin=net.origin)
        self.active: deque[_Pipe] = deque()
        self._timer: asyncio.TimerHandle | None = None
        self._soon: asyncio.Handle | None = None
        self._shared_wait = False

    def kick(self, pipe: _Pipe) -> None:
        if not pipe.in_active:
            pipe.in_active = True
            self.active.append(pipe)
        if self._soon is None and not (self._timer is not None and self._shared_wait):
            # a pending shared-bucket wait blocks every flow, so only per-flow waits are rescheduled
            if self._timer is not None:
                self._timer.cancel()
                self._timer = None
            self._soon = self.loop.call_soon(self._service)

    def _service(self) -> None:
        self._soon = None
        self._timer = None
        now = self.loop.time()
        self.bucket.refill(now)
        wake = math.inf
        shared_wait = False
        skipped = 0
        while self.active and skipped < len(self.active):
            pipe = self.active[0]
            if not pipe.queue or pipe.reset:
                self.active.popleft()
                pipe.in_active = False
                continue
            need = len(pipe.queue[0][0])
            fb = pipe.flow_bucket
            if fb is not None:
                fb.refill(now)
                w = fb.wait(need)
                if w > 0:
                    wake = min(wake, now + w)
                    self.active.rotate(-1)
                    skipped += 1
                    continue
            w = self.bucket.wait(need)
            if w > 0:
                wake = min(wake, now + w)
                shared_wait = True
                break
            self.bucket.take(need)
            if fb is not None:
                fb.take(need)
            seg, sent_at = pipe.queue.popleft()
            pipe.propagate(seg, sent_at, now)
            self.active.rotate(-1)
            skipped = 0
        if wake < math.inf:
            self._timer = self.loop.call_at(wake, self._service)
            self._shared_wait = shared_wait


class _Pipe:
    """One direction of one connection."""

    def __init__(self, net: SimNetwork, link: _Link, reader: asyncio.StreamReader, flow_cap: bool = True):
        self.net = net
        self.model = net.model
        self.loop = net.loop
        self.link = link
        self.reader = reader
        m = self.model
        self.flow_bucket = (
            _Bucket(m.bucket_depth, rate_bps=m.per_flow_cap_bps, origin=self.loop.time())
            if flow_cap and m.per_flow_cap_bps
            else None
        )
        self.mss = m.segment_bytes
        self.initial_window = m.initial_window_segments * self.mss
        self.cwnd = float(self.initial_window)
        self.ssthresh = math.inf
        self.unsent = bytearray()
        self.queue: deque[tuple[bytes, float]] = deque()
        self.inflight = 0
        self.in_active = False
        self.last_cwnd_limited = self.loop.time()
        self.last_arrival = 0.0
        self.arrivals: deque[tuple[float, bytes | None, float]] = deque()
        self._arrival_timer: asyncio.TimerHandle | None = None
        self._drain_waiters: list[asyncio.Future] = []
        self.closing = False
        self.eof_scheduled = False
        self.reset = False
        self.srtt: float | None = None
        self.rttvar = 0.0
        self.retransmits = 0
        self.bytes_acked = 0
        self.bytes_written = 0
        self.bytes_delivered = 0

    # sender side

    def write(self, data: bytes) -> None:
        if self.reset:
            raise ConnectionResetError("connection reset")
        if self.closing:
            raise ConnectionError("write after close")
        self.unsent += data
        self.bytes_written += len(data)
        self._push()

    def _push(self) -> None:
        now = self.loop.time()
        if (
            self.unsent
            and self.inflight == 0
            and now - self.last_cwnd_limited >= self.model.rto_s
            and self.cwnd > self.initial_window
        ):
            # restart window after an application-limited period
            self.ssthresh = max(self.ssthresh, 0.75 * self.cwnd)
            self.cwnd = float(self.initial_window)
        pushed = False
        while self.unsent:
            n = min(len(self.unsent), self.mss)
            if self.inflight and self.inflight + n > self.cwnd:
                self.last_cwnd_limited = now
                break
            seg = bytes(self.unsent[:n])
            del self.unsent[:n]
            self.inflight += n
            self.queue.append((seg, now))
            pushed = True
        if pushed:
            self.link.kick(self)
        if len(self.unsent) <= self.model.send_buffer_bytes:
            self._wake_writers()
        self._maybe_eof()

    def _wake_writers(self, exc: BaseException | None = None) -> None:
        waiters, self._drain_waiters = self._drain_waiters, []
        for fut in waiters:
            if not fut.done():
                if exc is None:
                    fut.set_result(None)
                else:
                    fut.set_exception(exc)

    async def wait_writable(self) -> None:
        while len(self.unsent) > self.model.send_buffer_bytes and not self.reset:
            fut = self.loop.create_future()
            self._drain_waiters.append(fut)
            await fut
        if self.reset:
            raise ConnectionResetError("connection reset")

    def close(self) -> None:
        self.closing = True
        self._maybe_eof()

    def _maybe_eof(self) -> None:
        if self.closing and not self.eof_scheduled and not self.unsent and not self.queue and not self.reset:
            self.eof_scheduled = True
            self._arrive(max(self.last_arrival, self.loop.time() + self.model.delay_s), None)

    # network side

    def propagate(self, seg: bytes, sent_at: float, now: float) -> None:
        m = self.model
        delay = m.delay_s
        if m.delay_jitter_ms:
            delay = max(0.0, delay + self.net.rng.uniform(-m.delay_jitter_ms, m.delay_jitter_ms) / 1000.0)
        if m.loss_rate and self.net.rng.random() < m.loss_rate:
            # recovered by a retransmission one round trip later; the copy costs capacity too
            self.retransmits += 1
            self.link.bucket.take(len(seg))
            delay += max(2 * m.delay_s, 0.001)
            self.ssthresh = max(self.cwnd / 2, 2 * self.mss)
            self.cwnd = self.ssthresh
        at = max(self.last_arrival, now + delay)
        self._arrive(at, seg, sent_at)
        self._maybe_eof()

    def _arrive(self, at: float, seg: bytes | None, sent_at: float = 0.0) -> None:
        self.last_arrival = at
        self.arrivals.append((at, seg, sent_at))
        if self._arrival_timer is None:
            self._arrival_timer = self.loop.call_at(at, self._deliver)

    def _deliver(self) -> None:
        self._arrival_timer = None
        if self.reset:
            return
        now = self.loop.time()
        acked = []
        while self.arrivals and self.arrivals[0][0] <= now + 1e-12:
            _, seg, sent_at = self.arrivals.popleft()
            if seg is None:
                self.reader.feed_eof()
            else:
                self.reader.feed_data(seg)
                self.bytes_delivered += len(seg)
                acked.append((len(seg), sent_at))
        if acked:
            self.loop.call_at(now + self.model.delay_s, self._on_ack, acked)
        if self.arrivals:
            self._arrival_timer = self.loop.call_at(self.arrivals[0][0], self._deliver)

    def _on_ack(self, acked: list[tuple[int, float]]) -> None:
        if self.reset:
            return
        now = self.loop.time()
        for n, sent_at in acked:
            limited = bool(self.unsent) or 2 * self.inflight >= self.cwnd
            self.inflight -= n
            self.bytes_acked += n
            sample = now - sent_at
            if self.srtt is None:
                self.srtt, self.rttvar = sample, sample / 2
            else:
                self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
                self.srtt = 0.875 * self.srtt + 0.125 * sample
            if limited:
                if self.cwnd < self.ssthresh:
                    self.cwnd += n
                else:
                    self.cwnd += self.mss * n / self.cwnd
                self.cwnd = min(self.cwnd, float(self.model.max_window_bytes))
        self._push()

    def abort(self, exc: BaseException) -> None:
        self.reset = True
        self.unsent.clear()
        self.queue.clear()
        self.arrivals.clear()
        if self._arrival_timer is not None:
            self._arrival_timer.cancel()
            self._arrival_timer = None
        if self.reader.exception() is None and not self.reader.at_eof():
            self.reader.set_exception(exc)
        self._wake_writers(exc)

    def tcp_info(self) -> dict[str, int | None]:
        return {
            "rtt_us": None if self.srtt is None else int(self.srtt * 1e6),
            "rtt_variance_us": None if self.srtt is None else int(self.rttvar * 1e6),
            "retransmits_count": self.retransmits,
            "slow_start_threshold_segments": None if self.ssthresh == math.inf else int(self.ssthresh // self.mss),
            "congestion_window_segments": int(self.cwnd // self.mss),
            "acked_bytes": self.bytes_acked,
        }


class SimStreamWriter:
    """asyncio.StreamWriter look-alike writing into a simulated pipe."""

    def __init__(self, pipe: _Pipe, sockname: tuple[str, int], peername: tuple[str, int]):
        self._pipe = pipe
        self._extra = {"sockname": sockname, "peername": peername, "socket": None}

    def write(self, data: bytes) -> None:
        self._pipe.write(data)

    def writelines(self, data) -> None:
        for d in data:
            self._pipe.write(d)

    async def drain(self) -> None:
        await self._pipe.wait_writable()

    def can_write_eof(self) -> bool:
        return True

    def write_eof(self) -> None:
        self._pipe.close()

    def close(self) -> None:
        self._pipe.close()

    def is_closing(self) -> bool:
        return self._pipe.closing or self._pipe.reset

    async def wait_closed(self) -> None:
        return None

    def get_extra_info(self, name: str, default=None):
        if name == "tcp_info":
            return self._pipe.tcp_info()
        if name == "sim_pipe":
            return self._pipe
        return self._extra.get(name, default)


Endpoint = tuple[asyncio.StreamReader, SimStreamWriter]


class SimConnection:
    def __init__(self, net: SimNetwork, client_addr, server_addr):
        self.client_reader = asyncio.StreamReader(limit=2**20)
        self.server_reader = asyncio.StreamReader(limit=2**20)
        # up: client -> server, down: server -> client
        self.up = _Pipe(net, net.up, self.server_reader)
        self.down = _Pipe(net, net.down, self.client_reader)
        self.client = (self.client_reader, SimStreamWriter(self.up, client_addr, server_addr))
        self.server = (self.server_reader, SimStreamWriter(self.down, server_addr, client_addr))

    def reset(self) -> None:
        """Abort both directions, as after an RST."""
        exc = ConnectionResetError("connection reset by peer (simulated)")
        self.up.abort(exc)
        self.down.abort(exc)

    @property
    def bytes_delivered(self) -> tuple[int, int]:
        return self.up.bytes_delivered, self.down.bytes_delivered


class SimNetwork:
    """A shaped link with an optional server attached at its far end.

    Must be created (or first used) inside the event loop that drives it.
    """

    def __init__(self, model: LinkModel, *, server_address: tuple[str, int] = ("10.0.0.1", 5201)):
        self.model = model
        self.loop = asyncio.get_running_loop()
        self.origin = self.loop.time()
        self.rng = random.Random(model.seed)
        self.up = _Link(self)
        self.down = _Link(self)
        self.server_address = server_address
        self.connections: list[SimConnection] = []
        self._handler: Callable[..., Awaitable] | None = None
        self._tasks: set[asyncio.Task] = set()
        self._next_port = 40000

    def capacity_now(self) -> float:
        return capacity_at(self.model, (self.loop.time() - self.origin) * 1e9)

    def start_server(self, handler: Callable[[asyncio.StreamReader, SimStreamWriter], Awaitable]) -> None:
        self._handler = handler

    def pair(self) -> tuple[Endpoint, Endpoint]:
        """A connected (client, server) endpoint pair with no handshake delay."""
        self._next_port += 1
        conn = SimConnection(self, ("10.0.0.2", self._next_port), self.server_address)
        self.connections.append(conn)
        return conn.client, conn.server

    async def open_connection(self, host: str | None = None, port: int | None = None, **_: Any) -> Endpoint:
        if self._handler is None:
            await asyncio.sleep(2 * self.model.delay_s)
            raise ConnectionRefusedError(f"no server on simulated link {host}:{port}")
        client, server = self.pair()
        # handshake: the server sees the connection after one delay, the client after a round trip
        self.loop.call_later(self.model.delay_s, self._spawn, *server)
        await asyncio.sleep(2 * self.model.delay_s)
        return client

    def path(self) -> list[tuple[str | None, int]]:
        """Hops toward the server as (address, round-trip µs): a gateway, then the server."""
        rtt_us = int(2 * self.model.delay_s * 1e6)
        return [("10.0.0.254", min(1000, rtt_us)), (self.server_address[0], rtt_us)]

    def _spawn(self, reader, writer) -> None:
        task = self.loop.create_task(self._handler(reader, writer))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)


def open_shaped_endpoint(model: LinkModel) -> tuple[Endpoint, Endpoint]:
    """Create a fresh network and return one connected endpoint pair."""
    return SimNetwork(model).pair()


class SimInternet:
    """Routes ``host:port`` addresses to simulated links, each with its own server."""

    def __init__(self):
        self.networks: dict[str, SimNetwork] = {}

    def add(self, address: str, model: LinkModel, handler) -> SimNetwork:
        host, _, port = address.rpartition(":")
        net = SimNetwork(model, server_address=(host, int(port)))
        net.start_server(handler)
        self.networks[address] = net
        return net

    async def open_connection(self, host: str, port: int, **kw: Any) -> Endpoint:
        net = self.networks.get(f"{host}:{port}")
        if net is None:
            await asyncio.sleep(0)
            raise ConnectionRefusedError(f"no simulated server at {host}:{port}")
        return await net.open_connection(host, port, **kw)


class ShapingProxy:
    """Real TCP proxy on loopback that forwards through a sim link in real time."""

    def __init__(self, model: LinkModel, upstream: tuple[str, int], listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.model = model
        self.upstream = upstream
        self.listen = listen
        self.net: SimNetwork | None = None
        self._server: asyncio.AbstractServer | None = None
        self._tasks: set[asyncio.Task] = set()

    async def start(self) -> ShapingProxy:
        self.net = SimNetwork(self.model)
        self._server = await asyncio.start_server(self._handle, *self.listen)
        return self

    @property
    def address(self) -> tuple[str, int]:
        return self._server.sockets[0].getsockname()[:2]

    async def close(self) -> None:
        self._server.close()
        await self._server.wait_closed()
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.close()

    async def _connect_upstream(self):
        host, port = self.upstream
        info = await asyncio.get_running_loop().getaddrinfo(host, port, type=socket.SOCK_STREAM)
        family, type_, proto, _, addr = info[0]
        sock = socket.socket(family, type_, proto)
        try:
            _limit_buffers(sock, self.model.send_buffer_bytes)
            sock.setblocking(False)
            await asyncio.get_running_loop().sock_connect(sock, addr)
        except BaseException:
            sock.close()
            raise
        return await asyncio.open_connection(sock=sock)

    async def _handle(self, creader, cwriter) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        # small kernel buffers, so backpressure from the shaped link reaches the endpoints
        _limit_buffers(cwriter.get_extra_info("socket"), self.model.send_buffer_bytes)
        try:
            ureader, uwriter = await self._connect_upstream()
        except OSError:
            cwriter.close()
            self._tasks.discard(task)
            return
        (a_reader, a_writer), (b_reader, b_writer) = self.net.pair()
        try:
            await asyncio.gather(
                _pump(creader, a_writer),
                _pump(b_reader, uwriter),
                _pump(ureader, b_writer),
                _pump(a_reader, cwriter),
            )
        except (OSError, asyncio.IncompleteReadError):
            pass
        finally:
            for w in (cwriter, uwriter):
                w.close()
            self._tasks.discard(task)


def _limit_buffers(sock, size: int) -> None:
    if sock is not None:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, size)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, size)


async def _pump(reader, writer) -> None:
    try:
        while True:
            data = await reader.read(65536)
            if not data:
                break
            writer.write(data)
            await writer.drain()
    finally:
        if writer.can_write_eof() and not writer.is_closing():
            try:
                writer.write_eof()
            except OSError:
                pass
