import asyncio
import socket
import struct
import sys

import pytest

from tcpspeed.client import measure
from tcpspeed.rate import compute_rate
from tcpspeed.records import MeasurementConfig, RunStatus
from tcpspeed.server import MeasurementServer, ServerConfig
from tcpspeed.simlink import LinkModel, ShapingProxy, SimNetwork, run_virtual
from tcpspeed.sockstats import (
    _TCP_NOTSENT_LOWAT, TCP_INFO_SUPPORTED, UNSENT_LOWAT_BYTES, StatsLog, capability, limit_unsent, parse_tcp_info,
    run_sampler, sample_flow,
)

needs_tcp_info = pytest.mark.skipif(not TCP_INFO_SUPPORTED, reason="TCP_INFO not available")


async def loopback_pair():
    accepted = asyncio.get_running_loop().create_future()

    async def on_conn(r, w):
        accepted.set_result((r, w))

    server = await asyncio.start_server(on_conn, "127.0.0.1", 0)
    cr, cw = await asyncio.open_connection(*server.sockets[0].getsockname()[:2])
    sr, sw = await accepted
    return server, (cr, cw), (sr, sw)


def test_parse_tcp_info_layout():
    raw = bytearray(232)
    u32 = [0] * 24
    u32[15], u32[16], u32[17], u32[18], u32[23] = 1500, 250, 0x7FFFFFFF, 10, 3
    struct.pack_into("=24I", raw, 8, *u32)
    struct.pack_into("=Q", raw, 120, 1 + 4096)
    info = parse_tcp_info(bytes(raw))
    assert info == {"rtt_us": 1500, "rtt_variance_us": 250, "retransmits_count": 3,
                    "slow_start_threshold_segments": None, "congestion_window_segments": 10, "acked_bytes": 4096}
    assert parse_tcp_info(bytes(raw[:110]))["acked_bytes"] is None
    assert parse_tcp_info(bytes(raw), active_open=False)["acked_bytes"] == 4097
    assert parse_tcp_info(b"\0" * 20) == {}


@needs_tcp_info
def test_loopback_sample():
    async def main():
        server, (cr, cw), (sr, sw) = await loopback_pair()
        before = sample_flow(sw, 0, 1, active_open=False)
        client_before = sample_flow(cw, 0, 1)
        sw.write(b"z" * 100_000)
        await sw.drain()
        await cr.readexactly(100_000)
        await asyncio.sleep(0.05)
        after = sample_flow(sw, 1, 1, active_open=False)
        cw.write(b"ack")
        await cw.drain()
        await sr.readexactly(3)
        await asyncio.sleep(0.05)
        client_after = sample_flow(cw, 1, 1)
        cw.close()
        sw.close()
        server.close()
        return before, after, client_before, client_after, capability(sw)

    before, after, client_before, client_after, cap = asyncio.run(main())
    assert cap == "tcp_info"
    assert before.acked_bytes == 0
    assert after.acked_bytes == 100_000
    assert (client_before.acked_bytes, client_after.acked_bytes) == (0, 3)
    assert after.rtt_us is not None and after.rtt_us < 5000
    assert after.retransmits_count >= before.retransmits_count
    assert not after.absent


@pytest.mark.skipif(not sys.platform.startswith("linux"), reason="Linux socket option")
def test_limit_unsent():
    async def main():
        server, (cr, cw), (sr, sw) = await loopback_pair()
        ok = limit_unsent(cw)
        value = cw.get_extra_info("socket").getsockopt(socket.IPPROTO_TCP, _TCP_NOTSENT_LOWAT)
        cw.close()
        sw.close()
        server.close()
        return ok, value

    assert asyncio.run(main()) == (True, UNSENT_LOWAT_BYTES)


def test_missing_introspection_gives_absent_sample():
    class Bare:
        def get_extra_info(self, name, default=None):
            return default

    s = sample_flow(Bare(), 5, 2)
    assert s.absent and (s.flow_id, s.t_ns) == (2, 5)
    assert capability(Bare()) == "none"
    assert limit_unsent(Bare()) is False


@pytest.mark.parametrize("virtual", [True, False])
def test_sampler_count_and_monotone(virtual):
    async def main():
        if virtual:
            (cr, cw), (sr, sw) = SimNetwork(LinkModel(10e6, one_way_delay_ms=5)).pair()
        else:
            server, (cr, cw), (sr, sw) = await loopback_pair()
        stop = asyncio.Event()
        task = asyncio.ensure_future(run_sampler(sw, 100, stop, flow_id=3))

        async def pump():
            loop = asyncio.get_running_loop()
            end = loop.time() + 2
            while loop.time() < end:
                sw.write(b"q" * 8192)
                await sw.drain()
                await cr.read(65536)

        await pump()
        stop.set()
        return await task

    samples = run_virtual(main()) if virtual else asyncio.run(main())
    assert 19 <= len(samples) <= 21
    ts = [s.t_ns for s in samples]
    assert ts == sorted(ts)
    if samples[0].acked_bytes is not None:
        for a, b in zip(samples, samples[1:]):
            assert b.acked_bytes >= a.acked_bytes and b.retransmits_count >= a.retransmits_count
    gaps = [(b - a) / 1e6 for a, b in zip(ts, ts[1:])]
    assert all(80 <= g <= 150 for g in gaps)


def test_sampler_stops_promptly_and_validates():
    async def main():
        (cr, cw), (sr, sw) = SimNetwork(LinkModel(1e6)).pair()
        stop = asyncio.Event()
        stop.set()
        n = len(await run_sampler(sw, 100, stop))
        with pytest.raises(ValueError):
            await run_sampler(sw, 0, asyncio.Event())
        return n

    assert run_virtual(main()) in (0, 1)


def test_sampling_does_not_slow_the_data_path():
    # modest rate and large segments keep the real-time proxy well below CPU saturation
    model = LinkModel(8e6, one_way_delay_ms=5, segment_bytes=8688)

    async def rate(interval_ms):
        srv = MeasurementServer(ServerConfig(host="127.0.0.1", port=0))
        await srv.start()
        try:
            async with ShapingProxy(model, srv.address) as proxy:
                host, port = proxy.address
                values = dict(server=f"{host}:{port}", flows=2, duration_dl_s=3, duration_ul_s=0.5,
                              pretest_s=0.2, ping_count=2, chunk_size_bytes=16384)
                if interval_ms:
                    values["stats_interval_ms"] = interval_ms
                cfg = MeasurementConfig.from_dict(values)
                stats = None
                if interval_ms:
                    stats = StatsLog(interval_ms)
                rec = await measure(cfg, stats=stats)
        finally:
            await srv.close()
        assert rec.status is RunStatus.COMPLETE, rec.errors
        return compute_rate(rec.dl_series).rate_bps, stats

    plain, _ = asyncio.run(rate(None))
    sampled, stats = asyncio.run(rate(10))
    assert len(stats.phases["dl"]) > 100
    assert abs(sampled - plain) / plain < 0.02
