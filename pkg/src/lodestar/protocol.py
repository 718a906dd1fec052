"""Fleet wire protocol: 4-byte big-endian length prefix + UTF-8 JSON object."""

from __future__ import annotations

import asyncio
import json
import struct
from typing import Any

from .errors import ProtocolError, ValidationError

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024

HELLO = "HELLO"
ASSIGN = "ASSIGN"
START = "START"
RDV_ARRIVE = "RDV_ARRIVE"
RDV_RELEASE = "RDV_RELEASE"
METRIC_BATCH = "METRIC_BATCH"
VUSERS = "VUSERS"
STOP = "STOP"
ABORT = "ABORT"
BYE = "BYE"

MESSAGE_TYPES = frozenset({HELLO, ASSIGN, START, RDV_ARRIVE, RDV_RELEASE, METRIC_BATCH, VUSERS, STOP, ABORT, BYE})

BATCH_INTERVAL_S = 1.0
BATCH_MAX_RECORDS = 500


def encode_frame(message: dict[str, Any]) -> bytes:
    if message.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {message.get('type')!r}")
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds limit")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> dict[str, Any]:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"bad frame payload: {exc}") from exc
    if not isinstance(message, dict) or message.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"bad message: {str(message)[:80]}")
    return message


async def read_frame(reader: asyncio.StreamReader) -> dict[str, Any]:
    """Read one message. Raises ``asyncio.IncompleteReadError`` on EOF."""
    header = await reader.readexactly(HEADER.size)
    (size,) = HEADER.unpack(header)
    if size > MAX_FRAME:
        raise ProtocolError(f"frame of {size} bytes exceeds limit")
    return decode_payload(await reader.readexactly(size))


class Channel:
    """A framed connection with serialized writes."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self._lock = asyncio.Lock()

    @property
    def peer(self) -> str:
        info = self.writer.get_extra_info("peername")
        return f"{info[0]}:{info[1]}" if info else "?"

    async def send(self, type_: str, **fields: Any) -> None:
        frame = encode_frame({"type": type_, **fields})
        async with self._lock:
            self.writer.write(frame)
            await self.writer.drain()

    async def recv(self) -> dict[str, Any]:
        return await read_frame(self.reader)

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def open_channel(host: str, port: int, timeout_s: float = 5.0) -> Channel:
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout_s)
    return Channel(reader, writer)


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError(f"expected host:port, got {address!r}")
    return host, int(port)
