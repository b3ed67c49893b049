"""Tiny HTTP/1.1 request-head reader shared by the in-process servers."""

from __future__ import annotations

import asyncio

MAX_HEAD_BYTES = 16384


class BadRequest(ValueError):
    """The request head could not be parsed."""


class BindFailure(OSError):
    """A server could not bind its requested address."""


async def read_request_head(reader: asyncio.StreamReader,
                            ) -> tuple[str, str, "dict[str, str]"]:
    """Read and parse one request head: (method, path, lowercase headers)."""
    try:
        raw = await reader.readuntil(b"\r\n\r\n")
    except (asyncio.IncompleteReadError, asyncio.LimitOverrunError) as exc:
        raise BadRequest(f"incomplete request head: {exc}") from exc
    if len(raw) > MAX_HEAD_BYTES:
        raise BadRequest("request head too large")
    try:
        text = raw.decode("latin-1")
    except UnicodeDecodeError as exc:  # pragma: no cover - latin-1 never fails
        raise BadRequest("undecodable request head") from exc
    lines = text.split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) != 3:
        raise BadRequest(f"bad request line: {lines[0]!r}")
    method, path, _version = parts
    headers: dict[str, str] = {}
    for line in lines[1:]:
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep:
            raise BadRequest(f"bad header line: {line!r}")
        headers[name.strip().lower()] = value.strip()
    return method, path, headers


def simple_response(status: int, reason: str, body: bytes = b"",
                    content_type: str = "text/plain") -> bytes:
    head = (f"HTTP/1.1 {status} {reason}\r\n"
            f"Content-Type: {content_type}\r\n"
            f"Content-Length: {len(body)}\r\n"
            "Connection: close\r\n\r\n")
    return head.encode("latin-1") + body
