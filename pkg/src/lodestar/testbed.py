"""Mock e-commerce server with controllable latency and capacity.

Endpoints mirror the three shipped scripts: ``GET /browse``, ``GET /search?q=``,
``POST /shop``. ``GET /_log`` dumps the request log, ``GET /_reset`` clears it.
"""

from __future__ import annotations

import asyncio
import collections
import random
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from aiohttp import web

from .errors import BindError, ValidationError

ENDPOINTS = ("/browse", "/search", "/shop")


@dataclass
class TestbedConfig:
    __test__ = False  # not a pytest class

    port: int = 8080
    latency_ms: float | Mapping[str, float] = 50.0
    service_slots: int = 10
    error_rate: float = 0.0
    seed: int = 0
    host: str = "127.0.0.1"

    def __post_init__(self):
        if self.service_slots < 1:
            raise ValidationError("service_slots must be >= 1")
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValidationError("error_rate must be in [0, 1]")
        values = self.latency_ms.values() if isinstance(self.latency_ms, Mapping) else [self.latency_ms]
        if any(v < 0 for v in values):
            raise ValidationError("latencies must be >= 0")

    def latency_for(self, path: str) -> float:
        if isinstance(self.latency_ms, Mapping):
            return float(self.latency_ms.get(path, self.latency_ms.get("*", 0.0)))
        return float(self.latency_ms)


class SlotGate:
    """FIFO counting gate; a released slot is handed straight to the oldest waiter."""

    def __init__(self, slots: int):
        self.free = slots
        self._waiters: collections.deque[asyncio.Future] = collections.deque()
        self.busy = 0
        self.peak_busy = 0

    async def acquire(self) -> None:
        if self.free > 0 and not self._waiters:
            self.free -= 1
        else:
            fut = asyncio.get_running_loop().create_future()
            self._waiters.append(fut)
            try:
                await fut
            except asyncio.CancelledError:
                if fut.done() and not fut.cancelled():
                    self.release()  # slot was handed over as we got cancelled
                else:
                    self._waiters.remove(fut)
                raise
        self.busy += 1
        self.peak_busy = max(self.peak_busy, self.busy)

    def release(self) -> None:
        self.busy -= 1
        while self._waiters:
            fut = self._waiters.popleft()
            if not fut.done():
                fut.set_result(None)
                return
        self.free += 1


@dataclass
class LogEntry:
    path: str
    method: str
    wall_ms: float
    queue_wait_ms: float
    status: int = 0


class Testbed:
    __test__ = False

    def __init__(self, config: TestbedConfig):
        self.config = config
        self.gate = SlotGate(config.service_slots)
        self.rng = random.Random(config.seed)
        self.log: list[LogEntry] = []
        self.responses_sent = 0
        self._runner: web.AppRunner | None = None
        self.port = config.port

    def app(self) -> web.Application:
        app = web.Application()
        app.router.add_get("/_log", self._dump_log)
        app.router.add_get("/_reset", self._reset_log)
        app.router.add_get("/browse", self._browse)
        app.router.add_get("/search", self._search)
        app.router.add_post("/shop", self._shop)
        app.router.add_route("*", "/{tail:.*}", self._fallback)
        return app

    async def _serve(self, request: web.Request, payload: dict[str, Any]) -> web.Response:
        entry = LogEntry(request.path_qs, request.method, time.time() * 1000.0, 0.0)
        self.log.append(entry)
        queued = time.monotonic()
        await self.gate.acquire()
        try:
            entry.queue_wait_ms = (time.monotonic() - queued) * 1000.0
            await asyncio.sleep(self.config.latency_for(request.path) / 1000.0)
        finally:
            self.gate.release()
        if self.config.error_rate and self.rng.random() < self.config.error_rate:
            entry.status = 500
            resp = web.json_response({"error": "injected"}, status=500)
        else:
            entry.status = 200
            resp = web.json_response(payload)
        self.responses_sent += 1
        return resp

    async def _browse(self, request: web.Request) -> web.Response:
        return await self._serve(request, {"items": [{"sku": "ant-100", "name": "antenna"}]})

    async def _search(self, request: web.Request) -> web.Response:
        return await self._serve(request, {"q": request.query.get("q", ""), "hits": 1})

    async def _shop(self, request: web.Request) -> web.Response:
        body = await request.read()
        if not body:
            self.log.append(LogEntry(request.path_qs, request.method, time.time() * 1000.0, 0.0, 400))
            self.responses_sent += 1
            return web.json_response({"error": "empty order"}, status=400)
        return await self._serve(request, {"order": "accepted", "bytes": len(body)})

    async def _fallback(self, request: web.Request) -> web.Response:
        status = 405 if request.path in ENDPOINTS else 404
        self.log.append(LogEntry(request.path_qs, request.method, time.time() * 1000.0, 0.0, status))
        self.responses_sent += 1
        return web.json_response({"error": "method not allowed" if status == 405 else "not found"}, status=status)

    async def _dump_log(self, request: web.Request) -> web.Response:
        return web.json_response([entry.__dict__ for entry in self.log])

    async def _reset_log(self, request: web.Request) -> web.Response:
        self.log.clear()
        return web.json_response({"cleared": True})

    async def start(self) -> "Testbed":
        self._runner = web.AppRunner(self.app(), access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.config.host, self.config.port, backlog=4096)
        try:
            await site.start()
        except OSError as exc:
            await self._runner.cleanup()
            raise BindError(f"cannot bind {self.config.host}:{self.config.port}: {exc}") from exc
        self.port = site._server.sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None

    @property
    def url(self) -> str:
        return f"http://{self.config.host}:{self.port}"


async def serve(config: TestbedConfig, stop: asyncio.Event,
                on_ready: Callable[["Testbed"], None] | None = None) -> list[LogEntry]:
    """Serve until ``stop`` is set; returns the request log."""
    bed = await Testbed(config).start()
    if on_ready is not None:
        on_ready(bed)
    try:
        await stop.wait()
    finally:
        await bed.stop()
    return bed.log


class TestbedThread:
    """Runs a testbed on its own event loop in a background thread.

    Keeps server work off the load generator's loop when both share a process.
    """

    __test__ = False

    def __init__(self, config: TestbedConfig | None = None, **kwargs):
        self.config = config or TestbedConfig(port=0, **kwargs)
        self.testbed = Testbed(self.config)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="testbed", daemon=True)

    def __enter__(self) -> "TestbedThread":
        self._thread.start()
        asyncio.run_coroutine_threadsafe(self.testbed.start(), self._loop).result(10)
        return self

    def __exit__(self, *exc) -> None:
        asyncio.run_coroutine_threadsafe(self.testbed.stop(), self._loop).result(10)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(10)
        self._loop.close()

    def call(self, fn, *args):
        """Run ``fn`` on the testbed loop (for consistent reads of its state)."""
        async def wrapper():
            return fn(*args)
        return asyncio.run_coroutine_threadsafe(wrapper(), self._loop).result(10)

    @property
    def url(self) -> str:
        return self.testbed.url

    def entries(self) -> list[LogEntry]:
        return self.call(lambda: list(self.testbed.log))

    def reset(self) -> None:
        self.call(self.testbed.log.clear)
