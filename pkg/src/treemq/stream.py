"""Packet framing over asyncio streams."""

from __future__ import annotations

import asyncio

from .codec import CodecError, FramingError, MalformedLength, Packet, decode_body

MAX_BODY_BYTES = 10 * 1024 * 1024


async def read_packet(reader: asyncio.StreamReader) -> tuple[Packet, int]:
    """Read one packet; returns (packet, wire byte count).

    Raises asyncio.IncompleteReadError on EOF and CodecError subclasses on
    malformed input.
    """
    first = (await reader.readexactly(1))[0]
    length = 0
    multiplier = 1
    consumed = 1
    for i in range(4):
        byte = (await reader.readexactly(1))[0]
        consumed += 1
        length += (byte & 0x7F) * multiplier
        multiplier *= 128
        if not byte & 0x80:
            break
    else:
        raise MalformedLength("remaining length exceeds 4 bytes")
    if length > MAX_BODY_BYTES:
        raise FramingError(f"packet body of {length} bytes exceeds limit")
    body = await reader.readexactly(length) if length else b""
    return decode_body(first >> 4, first & 0x0F, body), consumed + length
