"""Hop-by-hop path trace toward the measurement server, with ASN annotation.

Two probers are available.  ``IcmpProber`` sends echo requests on a raw
socket and needs CAP_NET_RAW.  ``UdpProber`` sends datagrams to high ports
and reads ICMP errors from the socket error queue (Linux IP_RECVERR), which
works unprivileged.  ``trace_path`` tries them in that order.
"""

from __future__ import annotations

import dataclasses
import ipaddress
import logging
import os
import select
import socket
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

log = logging.getLogger(__name__)

DEFAULT_MAX_TTL = 30
DEFAULT_PROBES_PER_HOP = 3
DEFAULT_TIMEOUT_S = 1.0
BASE_PORT = 33434

# linux/in.h and linux/errqueue.h; not all of these are exported by the socket module
_IP_RECVERR = getattr(socket, "IP_RECVERR", 11)
_MSG_ERRQUEUE = getattr(socket, "MSG_ERRQUEUE", 0x2000)
_SO_EE_ORIGIN_ICMP = 2
_ICMP_ECHO_REPLY, _ICMP_UNREACH, _ICMP_ECHO, _ICMP_TIME_EXCEEDED = 0, 3, 8, 11


@dataclass(frozen=True)
class TracerouteHop:
    ttl: int
    address: str | None = None
    rtt_us: int | None = None
    asn: int | None = None

    def __post_init__(self):
        if self.ttl < 1:
            raise ValueError(f"ttl must be >= 1, got {self.ttl}")


class TraceStatus:
    REACHED = "reached"
    UNREACHABLE = "unreachable"
    MAX_TTL = "max_ttl"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class TraceResult:
    target: str
    target_address: str | None = None
    status: str = TraceStatus.FAILED
    error: str | None = None
    method: str | None = None
    max_ttl: int = DEFAULT_MAX_TTL
    hops: list[TracerouteHop] = field(default_factory=list)
    extensions: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ProbeReply:
    address: str
    rtt_us: int
    reached: bool
    stop: bool = False  # an unreachable error ends the trace short of the target


class Prober(Protocol):
    method: str

    def probe(self, ttl: int, seq: int, timeout_s: float) -> ProbeReply | None: ...

    def close(self) -> None: ...


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    total = (total >> 16) + (total & 0xFFFF)
    total += total >> 16
    return ~total & 0xFFFF


def _elapsed_us(t0: int) -> int:
    return max(1, (time.monotonic_ns() - t0) // 1000)


class IcmpProber:
    """ICMP echo with increasing TTL over a raw socket."""

    method = "icmp"

    def __init__(self, dest: str):
        self.dest = dest
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_ICMP)
        self.ident = os.getpid() & 0xFFFF

    def _packet(self, seq: int) -> bytes:
        body = struct.pack("!d", time.time())
        header = struct.pack("!BBHHH", _ICMP_ECHO, 0, 0, self.ident, seq & 0xFFFF)
        csum = _checksum(header + body)
        return struct.pack("!BBHHH", _ICMP_ECHO, 0, csum, self.ident, seq & 0xFFFF) + body

    def _match(self, icmp: bytes, seq: int) -> bool:
        if len(icmp) < 8:
            return False
        ident, s = struct.unpack_from("!HH", icmp, 4)
        return ident == self.ident and s == seq & 0xFFFF

    def probe(self, ttl: int, seq: int, timeout_s: float) -> ProbeReply | None:
        self.sock.setsockopt(socket.IPPROTO_IP, socket.IP_TTL, ttl)
        t0 = time.monotonic_ns()
        self.sock.sendto(self._packet(seq), (self.dest, 0))
        deadline = time.monotonic() + timeout_s
        while (left := deadline - time.monotonic()) > 0:
            ready, _, _ = select.select([self.sock], [], [], left)
            if not ready:
                break
            data, (addr, _) = self.sock.recvfrom(2048)
            icmp = data[(data[0] & 0x0F) * 4:]
            if len(icmp) < 8:
                continue
            kind = icmp[0]
            if kind == _ICMP_ECHO_REPLY and self._match(icmp, seq):
                return ProbeReply(addr, _elapsed_us(t0), True)
            if kind in (_ICMP_TIME_EXCEEDED, _ICMP_UNREACH) and len(icmp) >= 28:
                inner = icmp[8:]
                inner_icmp = inner[(inner[0] & 0x0F) * 4:]
                if self._match(inner_icmp, seq):
                    return ProbeReply(addr, _elapsed_us(t0), addr == self.dest, kind == _ICMP_UNREACH)
        return None

    def close(self) -> None:
        self.sock.close()


class UdpProber:
    """UDP to high ports; ICMP errors are read back from the socket error queue."""

    method = "udp"

    def __init__(self, dest: str):
        self.dest = dest
        # fail early on platforms without the error queue
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.setsockopt(socket.SOL_IP, _IP_RECVERR, 1)

    def probe(self, ttl: int, seq: int, timeout_s: float) -> ProbeReply | None:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.setsockopt(socket.SOL_IP, _IP_RECVERR, 1)
            s.setsockopt(socket.IPPROTO_IP, socket.IP_TTL, ttl)
            poller = select.poll()
            poller.register(s, select.POLLERR | select.POLLIN)
            t0 = time.monotonic_ns()
            s.sendto(b"\0" * 32, (self.dest, BASE_PORT + seq % 1000))
            deadline = time.monotonic() + timeout_s
            while (left := deadline - time.monotonic()) > 0:
                if not poller.poll(left * 1000):
                    break
                try:
                    _, ancdata, _, _ = s.recvmsg(512, 512, _MSG_ERRQUEUE)
                except BlockingIOError:
                    # a regular datagram came back; the port happened to be open
                    s.recv(512)
                    return ProbeReply(self.dest, _elapsed_us(t0), True)
                rtt = _elapsed_us(t0)
                for level, kind, data in ancdata:
                    if level != socket.SOL_IP or kind != _IP_RECVERR or len(data) < 24:
                        continue
                    _errno, origin, icmp_type, code, _pad, _info, _data = struct.unpack_from("=IBBBBII", data)
                    if origin != _SO_EE_ORIGIN_ICMP:
                        continue
                    addr = socket.inet_ntoa(data[20:24])
                    reached = addr == self.dest or (icmp_type == _ICMP_UNREACH and code == 3)
                    return ProbeReply(addr, rtt, reached, icmp_type == _ICMP_UNREACH)
        return None

    def close(self) -> None:
        pass


class StaticProber:
    """Replays a fixed path; used against simulated links and in tests.

    ``path`` lists (address or None, rtt_us) per hop; the last entry is the target.
    """

    method = "static"

    def __init__(self, path: list[tuple[str | None, int]]):
        self.path = path

    def probe(self, ttl: int, seq: int, timeout_s: float) -> ProbeReply | None:
        if ttl > len(self.path):
            ttl = len(self.path)
        addr, rtt = self.path[ttl - 1]
        if addr is None:
            return None
        return ProbeReply(addr, rtt, ttl == len(self.path))

    def close(self) -> None:
        pass


def resolve(target: str) -> str:
    infos = socket.getaddrinfo(target, None, socket.AF_INET, socket.SOCK_DGRAM)
    return infos[0][4][0]


def _open_prober(dest: str) -> Prober:
    try:
        return IcmpProber(dest)
    except PermissionError:
        log.debug("raw ICMP not permitted, using UDP probes")
    return UdpProber(dest)


def trace_path(
    target: str,
    max_ttl: int = DEFAULT_MAX_TTL,
    probes_per_hop: int = DEFAULT_PROBES_PER_HOP,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    prober: Prober | None = None,
) -> TraceResult:
    """Probe with TTL 1..max_ttl, keeping the first reply per hop.

    Never raises for network problems: failures come back as an empty hop
    list with ``status="failed"`` so the measurement can go ahead.
    """
    if max_ttl < 1 or probes_per_hop < 1:
        raise ValueError("max_ttl and probes_per_hop must be >= 1")
    result = TraceResult(target=target, max_ttl=max_ttl)
    try:
        dest = resolve(target) if prober is None else target
        result.target_address = dest
        if prober is None:
            prober = _open_prober(dest)
        result.method = prober.method
    except OSError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        return result
    seq = 0
    try:
        for ttl in range(1, max_ttl + 1):
            reply = None
            for _ in range(probes_per_hop):
                seq += 1
                reply = prober.probe(ttl, seq, timeout_s)
                if reply is not None:
                    break
            if reply is None:
                result.hops.append(TracerouteHop(ttl))
                continue
            result.hops.append(TracerouteHop(ttl, reply.address, reply.rtt_us))
            if reply.reached or reply.stop:
                result.status = TraceStatus.REACHED if reply.reached else TraceStatus.UNREACHABLE
                return result
        result.status = TraceStatus.MAX_TTL
    except OSError as exc:
        result.status = TraceStatus.FAILED
        result.error = f"{type(exc).__name__}: {exc}"
        result.hops = []
    finally:
        prober.close()
    return result


class AsnTable:
    """Longest-prefix-match table loaded from ``prefix asn`` lines."""

    def __init__(self, entries: list[tuple[str, int]] | None = None):
        # prefix length -> {network address as int -> asn}, per address family
        self._tables: dict[int, dict[int, dict[int, int]]] = {4: {}, 6: {}}
        for prefix, asn in entries or ():
            self.add(prefix, asn)

    def add(self, prefix: str, asn: int) -> None:
        net = ipaddress.ip_network(prefix, strict=False)
        self._tables[net.version].setdefault(net.prefixlen, {})[int(net.network_address)] = int(asn)

    def __len__(self) -> int:
        return sum(len(t) for fam in self._tables.values() for t in fam.values())

    @classmethod
    def parse(cls, text: str) -> AsnTable:
        table = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'prefix asn', got {raw!r}")
            asn = parts[1].upper().removeprefix("AS")
            table.add(parts[0], int(asn))
        return table

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> AsnTable:
        return cls.parse(Path(path).read_text())

    def lookup(self, address: str) -> int | None:
        addr = ipaddress.ip_address(address)
        bits = addr.max_prefixlen
        value = int(addr)
        for plen in sorted(self._tables[addr.version], reverse=True):
            mask = ((1 << plen) - 1) << (bits - plen) if plen else 0
            asn = self._tables[addr.version][plen].get(value & mask)
            if asn is not None:
                return asn
        return None


def load_asn_db(path: str | os.PathLike | None) -> AsnTable | None:
    """Load the table, or warn and return None when the file is missing."""
    if path is None:
        return None
    try:
        return AsnTable.from_file(path)
    except FileNotFoundError:
        warnings.warn(f"ASN database {path} not found; hops stay unannotated", stacklevel=2)
        return None


def _is_public(address: str) -> bool:
    try:
        return ipaddress.ip_address(address).is_global
    except ValueError:
        return False


def annotate_asn(hops: list[TracerouteHop], asn_db: AsnTable | None) -> list[TracerouteHop]:
    """Set ``asn`` on hops with a public address; other fields are untouched."""
    out = []
    for hop in hops:
        asn = None
        if asn_db is not None and hop.address is not None and _is_public(hop.address):
            asn = asn_db.lookup(hop.address)
        out.append(dataclasses.replace(hop, asn=asn))
    return out
