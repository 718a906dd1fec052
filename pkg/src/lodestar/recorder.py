"""Recording proxy: captures plain-HTTP traffic into a replayable Script."""

from __future__ import annotations

import asyncio
import logging
from typing import Callable

import aiohttp
from aiohttp import web

from .errors import BindError, EmptyRecording
from .scripting import PLACEHOLDER, Request, Script, check_transactions

log = logging.getLogger(__name__)

HOP_BY_HOP = frozenset(
    h.lower() for h in (
        "Connection", "Keep-Alive", "Proxy-Authenticate", "Proxy-Authorization", "Proxy-Connection",
        "TE", "Trailer", "Transfer-Encoding", "Upgrade", "Host", "Content-Length",
    )
)


class Recorder:
    """Forward proxy. Clients must send absolute-form requests (``http://host/path``)."""

    def __init__(self, port: int = 0, host: str = "127.0.0.1", name: str = "recorded"):
        self.host = host
        self.port = port
        self.name = name
        self._captured: list[Request | None] = []
        self._runner: web.AppRunner | None = None
        self._client: aiohttp.ClientSession | None = None

    async def start(self) -> "Recorder":
        app = web.Application()
        app.router.add_route("*", "/{tail:.*}", self._proxy)
        self._runner = web.AppRunner(app, access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port)
        try:
            await site.start()
        except OSError as exc:
            await self._runner.cleanup()
            raise BindError(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        self.port = site._server.sockets[0].getsockname()[1]
        self._client = aiohttp.ClientSession(auto_decompress=False, cookie_jar=aiohttp.DummyCookieJar())
        return self

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None
        if self._client is not None:
            await self._client.close()
            self._client = None

    async def _proxy(self, request: web.Request) -> web.StreamResponse:
        # claim a slot now: order is the order request heads were read
        slot = len(self._captured)
        self._captured.append(None)
        body = await request.read()
        content_type = request.headers.get("Content-Type")
        text = body.decode("utf-8", errors="replace") if body else None
        path = request.path_qs
        literal = bool(PLACEHOLDER.search(path) or (text and PLACEHOLDER.search(text)))
        self._captured[slot] = Request(
            request.method,
            path,
            {"Content-Type": content_type} if content_type else {},
            text,
            None,
            literal,
        )
        if not request.url.is_absolute() or request.url.host in (None, ""):
            return web.Response(status=502, text="recorder expects absolute-form proxy requests")
        headers = {k: v for k, v in request.headers.items() if k.lower() not in HOP_BY_HOP}
        try:
            async with self._client.request(request.method, request.url, headers=headers, data=body or None,
                                            allow_redirects=False) as upstream:
                payload = await upstream.read()
                out_headers = {k: v for k, v in upstream.headers.items() if k.lower() not in HOP_BY_HOP}
                return web.Response(status=upstream.status, body=payload, headers=out_headers)
        except aiohttp.ClientError as exc:
            log.warning("upstream %s failed: %s", request.url, exc)
            return web.Response(status=502, text=str(exc))

    def script(self) -> Script:
        steps = tuple(s for s in self._captured if s is not None)
        if not steps:
            raise EmptyRecording("no requests were recorded")
        check_transactions(steps)
        return Script(self.name, steps, {})


async def record_session(listen_port: int, stop_signal: asyncio.Event, *, name: str = "recorded",
                         host: str = "127.0.0.1",
                         on_ready: Callable[[Recorder], None] | None = None) -> Script:
    """Proxy traffic on ``listen_port`` until ``stop_signal`` is set, then return the Script.

    One Request step per proxied request, in arrival order; Cookie headers are
    never recorded and no transaction markers are inserted.
    """
    recorder = await Recorder(listen_port, host, name).start()
    if on_ready is not None:
        on_ready(recorder)
    try:
        await stop_signal.wait()
    finally:
        await recorder.stop()
    return recorder.script()
