"""User-space TCP relay that injects a fixed one-way delay per direction.

Stands in for wide-area links at desk scale: a link with a 35 ms one-way
delay becomes a proxy that holds every chunk for 35 ms in each direction,
giving a 70 ms round trip.  Chunks are timestamped on arrival and
released in order, so the delay is additive, not throughput-limiting.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)

CHUNK = 65536


@dataclass
class DelayProxy:
    listen_host: str
    listen_port: int
    target_host: str
    target_port: int
    delay_s: float

    def __post_init__(self):
        self._server: asyncio.Server | None = None
        self._tasks: set[asyncio.Task] = set()

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._on_connection, host=self.listen_host, port=self.listen_port)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._tasks):
            task.cancel()

    async def _on_connection(self, client_reader, client_writer) -> None:
        try:
            upstream_reader, upstream_writer = await asyncio.open_connection(
                self.target_host, self.target_port)
        except OSError as exc:
            log.debug("proxy %s -> %s:%s dial failed: %s",
                      self.listen_port, self.target_host, self.target_port, exc)
            client_writer.close()
            return
        a = self._pump(client_reader, upstream_writer)
        b = self._pump(upstream_reader, client_writer)
        task_a = asyncio.current_task().get_loop().create_task(a)
        task_b = asyncio.current_task().get_loop().create_task(b)
        self._tasks.update({task_a, task_b})
        task_a.add_done_callback(self._tasks.discard)
        task_b.add_done_callback(self._tasks.discard)

    async def _pump(self, reader: asyncio.StreamReader,
                    writer: asyncio.StreamWriter) -> None:
        loop = asyncio.get_running_loop()
        queue: asyncio.Queue[tuple[float, bytes] | None] = asyncio.Queue()

        async def release():
            while True:
                item = await queue.get()
                if item is None:
                    break
                due, data = item
                wait = due - loop.time()
                if wait > 0:
                    await asyncio.sleep(wait)
                try:
                    writer.write(data)
                    await writer.drain()
                except (ConnectionError, RuntimeError):
                    break

        releaser = loop.create_task(release())
        try:
            while True:
                data = await reader.read(CHUNK)
                if not data:
                    break
                queue.put_nowait((loop.time() + self.delay_s, data))
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            queue.put_nowait(None)
            try:
                await releaser
            except asyncio.CancelledError:
                pass
            try:
                writer.close()
            except Exception:
                pass
