"""Clock helpers that follow the running event loop.

Under :class:`tcpspeed.simlink.VirtualTimeLoop` both clocks advance with
virtual time, so measurement code needs no special casing.
"""

from __future__ import annotations

import asyncio
from datetime import datetime, timedelta, timezone


def _loop():
    try:
        return asyncio.get_running_loop()
    except RuntimeError:
        return None


def monotonic_ns() -> int:
    loop = _loop()
    if loop is None:
        import time

        return time.monotonic_ns()
    return int(loop.time() * 1e9)


def utcnow() -> datetime:
    loop = _loop()
    epoch = getattr(loop, "virtual_epoch", None)
    if epoch is not None:
        return epoch + timedelta(seconds=loop.time())
    return datetime.now(timezone.utc)


def format_utc(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_utc(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {text!r} lacks a UTC offset")
    return dt.astimezone(timezone.utc)
