"""Line-based control protocol and data chunk framing.

Every control message is one ASCII line terminated by ``\\n``::

    NETTEST/1                  server greeting (protocol version)
    GETCHUNK <size>            pre-test DL: send one chunk of <size> bytes
    GETTIME <ns> <size>        DL: stream <size>-byte chunks for at least <ns>
    PING / PONG                latency probe and reply
    PINGOK                     server reply to OK at the end of the ping phase
    PUTNORESULT <size>         pre-test UL: client will send one chunk
    PUT <ns> <size>            UL: client streams chunks, server sends receipts
    TIME <ns> [<bytes>]        server timing report / UL receipt
    OK                         acknowledgement
    ERR <code>                 error, connection is closed afterwards
    QUIT                       end of session

Arguments are canonical unsigned decimal integers (no sign, no leading
zeros).  Durations travel as nanoseconds, sizes as bytes.

Data chunks are raw bytes of the negotiated size; the last byte is
``0x00`` for every chunk of a stream except the final one, which ends in
``0xFF``.
"""

from __future__ import annotations

import enum
import functools
import random
from dataclasses import dataclass

PROTOCOL_VERSION = 1
GREETING_PREFIX = b"NETTEST/"

MAX_LINE_BYTES = 256
MAX_ARG = 2**64 - 1

MIN_CHUNK_SIZE = 64
DEFAULT_CHUNK_SIZE = 4096
MAX_CHUNK_SIZE = 64 * 1024 * 1024

TERMINATOR_MORE = 0x00
TERMINATOR_FINAL = 0xFF


class ProtocolError(Exception):
    """Raised for malformed, unexpected or unconstructible protocol messages."""


class ChunkSizeError(ValueError):
    """Raised for a chunk size outside the supported range."""


class ErrorCode(enum.IntEnum):
    PARSE = 1
    UNEXPECTED = 2
    BUSY = 3
    BAD_ARGUMENT = 4
    TIMEOUT = 5


class Kind(enum.Enum):
    GREETING = "GREETING"
    GET_CHUNK = "GETCHUNK"
    GET_TIME = "GETTIME"
    PING = "PING"
    PONG = "PONG"
    PING_OK = "PINGOK"
    PUT_NO_RESULT = "PUTNORESULT"
    PUT = "PUT"
    TIME_REPORT = "TIME"
    OK = "OK"
    ERR = "ERR"
    QUIT = "QUIT"


# allowed argument counts per kind
ARITY: dict[Kind, tuple[int, ...]] = {
    Kind.GREETING: (1,),
    Kind.GET_CHUNK: (1,),
    Kind.GET_TIME: (2,),
    Kind.PING: (0,),
    Kind.PONG: (0,),
    Kind.PING_OK: (0,),
    Kind.PUT_NO_RESULT: (1,),
    Kind.PUT: (2,),
    Kind.TIME_REPORT: (1, 2),
    Kind.OK: (0,),
    Kind.ERR: (1,),
    Kind.QUIT: (0,),
}

_BY_VERB = {k.value.encode(): k for k in Kind if k is not Kind.GREETING}


@dataclass(frozen=True)
class ControlMessage:
    kind: Kind
    args: tuple[int, ...] = ()

    @classmethod
    def greeting(cls, version: int = PROTOCOL_VERSION) -> ControlMessage:
        return cls(Kind.GREETING, (version,))

    def validate(self) -> None:
        if self.kind not in ARITY:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if len(self.args) not in ARITY[self.kind]:
            raise ProtocolError(
                f"{self.kind.value} takes {' or '.join(map(str, ARITY[self.kind]))} "
                f"argument(s), got {len(self.args)}"
            )
        for a in self.args:
            if not isinstance(a, int) or isinstance(a, bool) or not 0 <= a <= MAX_ARG:
                raise ProtocolError(f"{self.kind.value}: argument {a!r} is not an unsigned 64-bit integer")


def serialize_message(m: ControlMessage) -> bytes:
    m.validate()
    if m.kind is Kind.GREETING:
        line = GREETING_PREFIX + str(m.args[0]).encode()
    else:
        line = " ".join([m.kind.value, *(str(int(a)) for a in m.args)]).encode()
    if len(line) + 1 > MAX_LINE_BYTES:
        raise ProtocolError(f"serialized {m.kind.value} exceeds {MAX_LINE_BYTES} bytes")
    return line + b"\n"


def _parse_uint(token: bytes) -> int:
    # canonical decimal only, so that parse -> serialize reproduces the line
    if not token or not token.isdigit() or not token.isascii() or (len(token) > 1 and token[:1] == b"0"):
        raise ProtocolError(f"non-numeric argument {token!r}")
    value = int(token)
    if value > MAX_ARG:
        raise ProtocolError(f"argument {token!r} out of range")
    return value


def parse_message(line: bytes) -> ControlMessage:
    if len(line) > MAX_LINE_BYTES:
        raise ProtocolError(f"line of {len(line)} bytes exceeds {MAX_LINE_BYTES}")
    if not line.endswith(b"\n"):
        raise ProtocolError(f"incomplete line {line[:32]!r}")
    body = line[:-1]
    if body.startswith(GREETING_PREFIX):
        return ControlMessage(Kind.GREETING, (_parse_uint(body[len(GREETING_PREFIX):]),))
    tokens = body.split(b" ")
    kind = _BY_VERB.get(tokens[0])
    if kind is None:
        raise ProtocolError(f"unknown verb {tokens[0][:32]!r}")
    args = tuple(_parse_uint(t) for t in tokens[1:])
    if len(args) not in ARITY[kind]:
        raise ProtocolError(f"{kind.value}: wrong number of arguments ({len(args)})")
    return ControlMessage(kind, args)


def fill_chunk(buffer: bytearray | memoryview, size: int, is_final: bool, rng: random.Random) -> memoryview:
    """Fill ``buffer[:size]`` with pseudo-random bytes and the terminator.

    Returns a view of the filled region. The payload comes from ``rng`` so
    two generators with the same seed yield identical chunks.
    """
    if size < MIN_CHUNK_SIZE:
        raise ChunkSizeError(f"chunk size {size} below minimum {MIN_CHUNK_SIZE}")
    if len(buffer) < size:
        raise ChunkSizeError(f"buffer of {len(buffer)} bytes cannot hold a {size}-byte chunk")
    view = memoryview(buffer)[:size]
    view[: size - 1] = rng.randbytes(size - 1)
    view[size - 1] = TERMINATOR_FINAL if is_final else TERMINATOR_MORE
    return view


def is_final_chunk(chunk: bytes | memoryview) -> bool:
    return chunk[-1] == TERMINATOR_FINAL


def check_chunk_size(size: int) -> int:
    if not MIN_CHUNK_SIZE <= size <= MAX_CHUNK_SIZE:
        raise ChunkSizeError(f"chunk size {size} outside [{MIN_CHUNK_SIZE}, {MAX_CHUNK_SIZE}]")
    return size


@functools.lru_cache(maxsize=8)
def _pool(seed: int, size: int) -> memoryview:
    # read-only and shared between sources with the same seed
    pool = bytearray(size + MIN_CHUNK_SIZE)
    fill_chunk(pool, len(pool), False, random.Random(seed))
    return memoryview(bytes(pool))[:size]


class ChunkSource:
    """Serves chunks cut from a seeded random pool.

    Consecutive chunks come from advancing offsets of a pool larger than
    common compression windows, so a stream of equal-sized chunks does not
    repeat within those windows.
    """

    POOL_SIZE = 1 << 22

    def __init__(self, seed: int = 0, pool_size: int = POOL_SIZE):
        self._pool = _pool(seed, pool_size)
        self._offset = 0

    def chunk(self, size: int, is_final: bool) -> bytes:
        n = size - 1
        out = bytearray(size)
        pos = 0
        while pos < n:
            take = min(n - pos, len(self._pool) - self._offset)
            out[pos : pos + take] = self._pool[self._offset : self._offset + take]
            pos += take
            self._offset = (self._offset + take) % len(self._pool)
        out[n] = TERMINATOR_FINAL if is_final else TERMINATOR_MORE
        return bytes(out)
