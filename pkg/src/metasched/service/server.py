"""asyncio front-end: newline-delimited JSON over TCP."""

from __future__ import annotations

import asyncio
import json
import logging
import signal

from ..errors import BindFailed, OversizeLine, SchedulerError
from .config import ServiceConfig
from .core import Service
from .wire import MAX_LINE, decode_message, encode_message, error

log = logging.getLogger(__name__)


class Server:
    def __init__(self, service: Service):
        self.service = service
        self._server = None
        self._tick_task = None
        self.port = None

    async def start(self):
        host, port = self.service.config.host_port
        try:
            self._server = await asyncio.start_server(self._client, host, port,
                                                      limit=MAX_LINE + 2)
        except OSError as exc:
            raise BindFailed(f"cannot listen on {host}:{port}: {exc}") from None
        self.port = self._server.sockets[0].getsockname()[1]
        self._tick_task = asyncio.create_task(self._ticker())
        log.info("listening on %s:%d", host, self.port)

    async def _ticker(self):
        period = self.service.config.tick_period_s
        while True:
            try:
                self.service.tick()
            except Exception:
                log.exception("tick failed")
            await asyncio.sleep(period)

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            while True:
                try:
                    line = await reader.readuntil(b"\n")
                except asyncio.IncompleteReadError as exc:
                    if not exc.partial.strip():
                        break
                    line = exc.partial
                except asyncio.LimitOverrunError:
                    await self._skip_line(reader)
                    writer.write(encode_message(error("", OversizeLine.code,
                                                      f"line exceeds {MAX_LINE} bytes")))
                    await writer.drain()
                    continue
                if not line.strip():
                    continue
                reply = self._dispatch(line)
                writer.write(encode_message(reply))
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            writer.close()

    async def _skip_line(self, reader):
        while True:
            try:
                await reader.readuntil(b"\n")
                return
            except asyncio.LimitOverrunError as exc:
                await reader.readexactly(exc.consumed)
            except asyncio.IncompleteReadError:
                return

    def _dispatch(self, line: bytes):
        try:
            msg = decode_message(line)
        except SchedulerError as exc:
            return error(_request_id(line), exc.code, str(exc))
        # handle() runs without awaiting, so commands are serialized on the loop
        return self.service.handle(msg)

    async def stop(self):
        if self._tick_task is not None:
            self._tick_task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


def _request_id(line: bytes) -> str:
    """Best effort: echo the request_id of an otherwise unusable message."""
    try:
        rid = json.loads(line).get("request_id", "")
    except Exception:
        return ""
    return rid if isinstance(rid, str) else ""


async def serve_async(config: ServiceConfig, ready=None):
    service = Service(config).start()
    server = Server(service)
    try:
        await server.start()
        if ready is not None:
            ready(server)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        await stop.wait()
    finally:
        await server.stop()
        service.snapshot()
        service.close()


def serve(config: ServiceConfig, ready=None) -> None:
    asyncio.run(serve_async(config, ready))
