"""Minimal asyncio MQTT client for load generation and tests."""

from __future__ import annotations

import asyncio
import itertools
from dataclasses import dataclass

from . import codec
from .codec import (
    Connack,
    Connect,
    Disconnect,
    Pingreq,
    Pingresp,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Suback,
    Subscribe,
    Will,
)
from .stream import read_packet


class MqttError(Exception):
    pass


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: int
    retain: bool


class MqttClient:
    """One connection to one broker.

    ``publish`` at QoS 1 waits for PUBACK; at QoS 2 it waits for the full
    four-part handshake to finish, which is what gates back-to-back
    publishing.  Inbound messages land in ``messages`` (an asyncio.Queue)
    unless an ``on_message`` callback was given.
    """

    def __init__(self, client_id: str, on_message=None):
        self.client_id = client_id
        self.on_message = on_message
        self.messages: asyncio.Queue[Message] = asyncio.Queue()
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._read_task: asyncio.Task | None = None
        self._ping_task: asyncio.Task | None = None
        self._packet_ids = itertools.cycle(range(1, 0x10000))
        self._acks: dict[int, asyncio.Future] = {}
        self._subacks: dict[int, asyncio.Future] = {}
        self._inbound_qos2: set[int] = set()
        self._closed = asyncio.Event()
        self._error: Exception | None = None

    async def connect(self, host: str, port: int, keep_alive_s: int = 30,
                      will: Will | None = None, timeout: float = 10.0) -> None:
        self._reader, self._writer = await asyncio.wait_for(
            asyncio.open_connection(host, port), timeout)
        pkt = Connect(client_id=self.client_id, keep_alive_s=keep_alive_s, will=will)
        self._writer.write(codec.encode_packet(pkt))
        ack, _ = await asyncio.wait_for(read_packet(self._reader), timeout)
        if not isinstance(ack, Connack) or ack.return_code != codec.CONNACK_ACCEPTED:
            raise MqttError(f"connection refused: {ack}")
        self._read_task = asyncio.get_running_loop().create_task(self._read_loop())
        if keep_alive_s > 0:
            self._ping_task = asyncio.get_running_loop().create_task(
                self._ping_loop(keep_alive_s / 2))

    async def _read_loop(self) -> None:
        assert self._reader is not None
        try:
            while True:
                packet, _ = await read_packet(self._reader)
                await self._on_packet(packet)
        except (asyncio.IncompleteReadError, ConnectionError, codec.CodecError) as exc:
            self._error = exc
        finally:
            self._closed.set()
            for fut in list(self._acks.values()) + list(self._subacks.values()):
                if not fut.done():
                    fut.set_exception(MqttError("connection closed"))

    async def _on_packet(self, packet) -> None:
        if isinstance(packet, Publish):
            await self._on_publish(packet)
        elif isinstance(packet, (Puback, Pubcomp)):
            fut = self._acks.pop(packet.packet_id, None)
            if fut and not fut.done():
                fut.set_result(None)
        elif isinstance(packet, Pubrec):
            self._write(codec.encode_packet(Pubrel(packet.packet_id)))
        elif isinstance(packet, Pubrel):
            self._inbound_qos2.discard(packet.packet_id)
            self._write(codec.encode_packet(Pubcomp(packet.packet_id)))
        elif isinstance(packet, Suback):
            fut = self._subacks.pop(packet.packet_id, None)
            if fut and not fut.done():
                fut.set_result(packet.return_codes)
        elif isinstance(packet, (Pingresp, Pingreq)):
            pass
        # anything else is ignored; the broker closes on real violations

    async def _on_publish(self, pkt: Publish) -> None:
        deliver = True
        if pkt.qos == 1:
            self._write(codec.encode_packet(Puback(pkt.packet_id)))
        elif pkt.qos == 2:
            deliver = pkt.packet_id not in self._inbound_qos2
            self._inbound_qos2.add(pkt.packet_id)
            self._write(codec.encode_packet(Pubrec(pkt.packet_id)))
        if deliver:
            msg = Message(topic=pkt.topic, payload=pkt.payload,
                          qos=pkt.qos, retain=pkt.retain)
            if self.on_message is not None:
                self.on_message(msg)
            else:
                self.messages.put_nowait(msg)

    async def _ping_loop(self, interval_s: float) -> None:
        while not self._closed.is_set():
            await asyncio.sleep(interval_s)
            self._write(codec.encode_packet(Pingreq()))

    def _write(self, data: bytes) -> None:
        if self._writer is None:
            raise MqttError("not connected")
        self._writer.write(data)

    def _next_id(self) -> int:
        for _ in range(0xFFFF):
            pid = next(self._packet_ids)
            if pid not in self._acks:
                return pid
        raise MqttError("no free packet ids")

    async def subscribe(self, topic_filter: str, qos: int = 0,
                        timeout: float = 10.0) -> tuple[int, ...]:
        pid = self._next_id()
        fut = asyncio.get_running_loop().create_future()
        self._subacks[pid] = fut
        self._write(codec.encode_packet(Subscribe(packet_id=pid, filters=((topic_filter, qos),))))
        codes = await asyncio.wait_for(fut, timeout)
        if any(c == 0x80 for c in codes):
            raise MqttError(f"subscription to {topic_filter!r} rejected")
        return codes

    async def publish(self, topic: str, payload: bytes, qos: int = 0,
                      retain: bool = False, timeout: float = 30.0) -> None:
        if qos == 0:
            self._write(codec.encode_packet(Publish(topic=topic, payload=payload,
                                                    qos=0, retain=retain)))
            return
        pid = self._next_id()
        fut = asyncio.get_running_loop().create_future()
        self._acks[pid] = fut
        self._write(codec.encode_packet(Publish(topic=topic, payload=payload, qos=qos,
                                                retain=retain, packet_id=pid)))
        assert self._writer is not None
        await self._writer.drain()
        await asyncio.wait_for(fut, timeout)

    async def disconnect(self) -> None:
        if self._writer is None:
            return
        try:
            self._write(codec.encode_packet(Disconnect()))
            await self._writer.drain()
        except Exception:
            pass
        await self.close()

    async def close(self) -> None:
        """Drop the connection without DISCONNECT (ungraceful)."""
        for task in (self._read_task, self._ping_task):
            if task is not None:
                task.cancel()
        if self._writer is not None:
            try:
                self._writer.close()
            except Exception:
                pass
        self._closed.set()

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._closed.is_set()
