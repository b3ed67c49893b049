"""Live event streaming: one websocket path per region fanning out JSON
arrays of idling events.

Consumers subscribe at ``/events/<region_id>`` via a standard websocket
upgrade. Every detector batch is serialized once and delivered to all of
the region's subscribers as a single text frame; an empty batch is the
two-byte frame ``[]``, sent without error. Each subscriber owns a bounded
queue, so a slow consumer never stalls broadcast to the others -- on
overflow that subscriber alone is disconnected with a close code.

No third-party websocket stack is used: the handshake and framing needed
here (server-sent text frames, ping/pong, close) are implemented directly
over asyncio streams per RFC 6455.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import logging
import os
import time
from typing import Iterable, Optional

from ._http import BadRequest, BindFailure, read_request_head, simple_response
from .model import IdlingEvent

logger = logging.getLogger(__name__)

_WS_MAGIC = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

CLOSE_GOING_AWAY = 1001
CLOSE_OVERFLOW = 1013

DEFAULT_QUEUE_DEPTH = 64


class ConnectionClosed(ConnectionError):
    """The peer closed the websocket."""


class HandshakeError(ConnectionError):
    """The websocket upgrade was refused."""

    def __init__(self, status: int, reason: str):
        super().__init__(f"{status} {reason}")
        self.status = status


def encode_batch(batch: Iterable[IdlingEvent]) -> bytes:
    """Canonical wire form of a batch: a JSON array of eight-key objects.

    Keys keep the fixed order (iata_id, vehicle_id, route_id, trip_id,
    latitude, longitude, datetime, duration); coordinates serialize with
    full double precision, datetime and duration as bare integers.
    """
    return json.dumps([event.as_dict() for event in batch],
                      separators=(",", ":")).encode("utf-8")


def _accept_key(client_key: str) -> str:
    digest = hashlib.sha1(client_key.encode("latin-1") + _WS_MAGIC).digest()
    return base64.b64encode(digest).decode("latin-1")


def encode_frame(opcode: int, payload: bytes, mask: bool = False) -> bytes:
    head = bytearray([0x80 | opcode])
    length = len(payload)
    mask_bit = 0x80 if mask else 0
    if length < 126:
        head.append(mask_bit | length)
    elif length < 1 << 16:
        head.append(mask_bit | 126)
        head += length.to_bytes(2, "big")
    else:
        head.append(mask_bit | 127)
        head += length.to_bytes(8, "big")
    if mask:
        key = os.urandom(4)
        head += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return bytes(head) + payload


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    """Read one frame, returning (opcode, unmasked payload)."""
    try:
        first = await reader.readexactly(2)
        length = first[1] & 0x7F
        if length == 126:
            length = int.from_bytes(await reader.readexactly(2), "big")
        elif length == 127:
            length = int.from_bytes(await reader.readexactly(8), "big")
        key = await reader.readexactly(4) if first[1] & 0x80 else None
        payload = await reader.readexactly(length)
    except (asyncio.IncompleteReadError, ConnectionError) as exc:
        raise ConnectionClosed("connection dropped mid-frame") from exc
    if key is not None:
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return first[0] & 0x0F, payload


def close_frame(code: int) -> bytes:
    return encode_frame(OP_CLOSE, code.to_bytes(2, "big"))


class _Subscriber:
    """One live connection: a bounded queue drained by a pump task."""

    def __init__(self, region_id: str, writer: asyncio.StreamWriter,
                 depth: int):
        self.region_id = region_id
        self.writer = writer
        self.queue: "asyncio.Queue[bytes]" = asyncio.Queue(maxsize=depth)
        self.connected_at = time.time()
        self.pump_task: Optional[asyncio.Task] = None
        self.closed = False

    def kick(self, code: int) -> None:
        """Disconnect immediately (called from broadcast or shutdown)."""
        if self.closed:
            return
        self.closed = True
        try:
            self.writer.write(close_frame(code))
        except (ConnectionError, OSError, RuntimeError):
            pass
        if self.pump_task is not None:
            self.pump_task.cancel()
        try:
            self.writer.close()
        except (ConnectionError, OSError, RuntimeError):
            pass


class EventStreamServer:
    """Websocket fan-out server over the configured region ids."""

    def __init__(self, regions: Iterable[str], host: str = "127.0.0.1",
                 port: int = 0, queue_depth: int = DEFAULT_QUEUE_DEPTH):
        self.host = host
        self._requested_port = port
        self.queue_depth = queue_depth
        self._subscribers: "dict[str, set[_Subscriber]]" = {
            region: set() for region in regions}
        self._server: Optional[asyncio.AbstractServer] = None

    async def start(self) -> None:
        try:
            self._server = await asyncio.start_server(
                self._handle, self.host, self._requested_port)
        except OSError as exc:
            raise BindFailure(
                f"cannot bind {self.host}:{self._requested_port}: {exc}") from exc

    @property
    def port(self) -> int:
        assert self._server is not None, "server not started"
        return self._server.sockets[0].getsockname()[1]

    def subscriber_count(self, region_id: str) -> int:
        return len(self._subscribers.get(region_id, ()))

    async def stop(self) -> None:
        """Graceful shutdown: close every subscription, then the listener."""
        for members in self._subscribers.values():
            for sub in list(members):
                sub.kick(CLOSE_GOING_AWAY)
            members.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    def broadcast(self, region_id: str, batch: "list[IdlingEvent]") -> int:
        """Enqueue one batch to every live subscriber of the region.

        Returns the number of subscribers reached. A subscriber whose
        queue is full is disconnected; the others are unaffected.
        """
        members = self._subscribers.get(region_id)
        if not members:
            return 0
        frame = encode_frame(OP_TEXT, encode_batch(batch))
        delivered = 0
        for sub in list(members):
            try:
                sub.queue.put_nowait(frame)
                delivered += 1
            except asyncio.QueueFull:
                logger.warning("%s: subscriber overflow, disconnecting",
                               region_id)
                members.discard(sub)
                sub.kick(CLOSE_OVERFLOW)
        return delivered

    async def _handle(self, reader: asyncio.StreamReader,
                      writer: asyncio.StreamWriter) -> None:
        try:
            method, path, headers = await read_request_head(reader)
        except BadRequest:
            writer.write(simple_response(400, "Bad Request"))
            writer.close()
            return
        region_id = path.removeprefix("/events/")
        if not path.startswith("/events/") or region_id not in self._subscribers:
            writer.write(simple_response(404, "Not Found",
                                         b"unknown region stream\n"))
            writer.close()
            return
        key = headers.get("sec-websocket-key")
        if (method != "GET" or key is None
                or headers.get("upgrade", "").lower() != "websocket"):
            writer.write(simple_response(400, "Bad Request",
                                         b"websocket upgrade required\n"))
            writer.close()
            return
        writer.write((
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {_accept_key(key)}\r\n\r\n"
        ).encode("latin-1"))

        sub = _Subscriber(region_id, writer, self.queue_depth)
        self._subscribers[region_id].add(sub)
        sub.pump_task = asyncio.current_task()
        try:
            await self._pump(sub, reader)
        except asyncio.CancelledError:
            pass
        except (ConnectionError, OSError) as exc:
            logger.debug("%s: subscriber dropped: %s", region_id, exc)
        finally:
            self._subscribers[region_id].discard(sub)
            sub.closed = True
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def _pump(self, sub: _Subscriber,
                    reader: asyncio.StreamReader) -> None:
        """Interleave queued outbound frames with inbound control frames."""
        inbound = asyncio.ensure_future(read_frame(reader))
        outbound = asyncio.ensure_future(sub.queue.get())
        try:
            while True:
                done, _pending = await asyncio.wait(
                    {inbound, outbound}, return_when=asyncio.FIRST_COMPLETED)
                if outbound in done:
                    sub.writer.write(outbound.result())
                    await sub.writer.drain()
                    outbound = asyncio.ensure_future(sub.queue.get())
                if inbound in done:
                    try:
                        opcode, payload = inbound.result()
                    except ConnectionClosed:
                        return
                    if opcode == OP_CLOSE:
                        sub.writer.write(close_frame(1000))
                        await sub.writer.drain()
                        return
                    if opcode == OP_PING:
                        sub.writer.write(encode_frame(OP_PONG, payload))
                        await sub.writer.drain()
                    inbound = asyncio.ensure_future(read_frame(reader))
        finally:
            inbound.cancel()
            outbound.cancel()


class StreamClient:
    """Small websocket client used by tests and tooling to tail a region."""

    def __init__(self, reader: asyncio.StreamReader,
                 writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer

    @classmethod
    async def connect(cls, host: str, port: int, region_id: str,
                      ) -> "StreamClient":
        reader, writer = await asyncio.open_connection(host, port)
        key = base64.b64encode(os.urandom(16)).decode("latin-1")
        writer.write((
            f"GET /events/{region_id} HTTP/1.1\r\n"
            f"Host: {host}:{port}\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\n"
            "Sec-WebSocket-Version: 13\r\n\r\n"
        ).encode("latin-1"))
        status_line = await reader.readline()
        parts = status_line.decode("latin-1").split(" ", 2)
        status = int(parts[1]) if len(parts) >= 2 and parts[1].isdigit() else 0
        accept = None
        while True:
            line = await reader.readline()
            if line in (b"\r\n", b"\n", b""):
                break
            name, _, value = line.decode("latin-1").partition(":")
            if name.strip().lower() == "sec-websocket-accept":
                accept = value.strip()
        if status != 101:
            writer.close()
            raise HandshakeError(status, "upgrade refused")
        if accept != _accept_key(key):
            writer.close()
            raise HandshakeError(status, "bad accept key")
        return cls(reader, writer)

    async def recv_text(self) -> str:
        """Next text message; answers pings, raises ConnectionClosed on
        close frames."""
        while True:
            opcode, payload = await read_frame(self._reader)
            if opcode == OP_TEXT:
                return payload.decode("utf-8")
            if opcode == OP_PING:
                self._writer.write(encode_frame(OP_PONG, payload, mask=True))
                await self._writer.drain()
            elif opcode == OP_CLOSE:
                code = int.from_bytes(payload[:2], "big") if payload else 1005
                raise ConnectionClosed(f"closed by server (code {code})")

    async def close(self) -> None:
        try:
            # Client-to-server frames are masked per RFC 6455.
            self._writer.write(encode_frame(OP_CLOSE, (1000).to_bytes(2, "big"),
                                            mask=True))
            await self._writer.drain()
        except (ConnectionError, OSError):
            pass
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            pass
