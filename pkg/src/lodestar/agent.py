"""Load generator agent: hosts a pool of vusers on behalf of a controller.

An agent listens for controller connections. Each connection is one session:

    agent -> HELLO{tag, capacity}
    ctl   -> ASSIGN{run_id, target, seed, scripts, bindings, id_block}
    ctl   -> START{schedule, t0_wall_ms, virtual, monitor_interval_ms}
    agent -> VUSERS / RDV_ARRIVE / METRIC_BATCH ...   ctl -> RDV_RELEASE / STOP / ABORT
    agent -> BYE{emitted, batches}

A session with no vusers and a monitor interval is a monitor-only session that
lasts until STOP.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Any

from . import protocol
from .errors import AbortSignal, LodestarError
from .monitor import HostCounters, sample_counters
from .runtime import RealClock, VirtualClock, VuserContext, is_mock_target, run_vuser_loop
from .scripting import Script, parse_script

log = logging.getLogger(__name__)

GRACE_S = 5.0
_NS_PER_MS = 1_000_000


class FleetRendezvousClient:
    """Forwards arrivals to the controller and waits for its RDV_RELEASE."""

    def __init__(self, channel: protocol.Channel):
        self.channel = channel
        self._pending: dict[tuple[str, int], asyncio.Future] = {}

    def released(self, name: str, cohort: list[int], time_ms: float | None = None) -> None:
        for vid in cohort:
            fut = self._pending.pop((name, int(vid)), None)
            if fut is not None and not fut.done():
                fut.set_result(time_ms)

    async def arrive(self, vuser_id: int, name: str):
        fut = asyncio.get_running_loop().create_future()
        self._pending[(name, vuser_id)] = fut
        try:
            await self.channel.send(protocol.RDV_ARRIVE, vuser=vuser_id, name=name)
            return await fut
        finally:
            self._pending.pop((name, vuser_id), None)


class Session:
    def __init__(self, channel: protocol.Channel, assign: dict[str, Any], start: dict[str, Any]):
        self.channel = channel
        self.run_id = str(assign.get("run_id", "run"))
        self.target = assign.get("target", "")
        self.seed = int(assign.get("seed", 0))
        self.timeout_s = float(assign.get("timeout_ms", 30_000)) / 1000.0
        self.scripts: dict[str, Script] = {}
        bindings = assign.get("bindings", {})
        for group, doc in assign.get("scripts", {}).items():
            self.scripts[group] = parse_script({**doc, "parameters": bindings.get(group, {})})
        self.schedule = start.get("schedule", {})
        self.t0_wall_ms = int(start.get("t0_wall_ms", 0))
        self.virtual = bool(start.get("virtual", is_mock_target(self.target)))
        self.monitor_interval_ms = start.get("monitor_interval_ms")

        self.stop = asyncio.Event()
        self.abort = asyncio.Event()
        self.rendezvous = FleetRendezvousClient(channel)
        self._records: list[dict[str, Any]] = []
        self._counters: list[dict[str, Any]] = []
        self._omitted: list[str] = []
        self._wake = asyncio.Event()
        self._closing = False
        self.seq = 0
        self.emitted = 0
        self._vusers: list[asyncio.Task] = []

    # -- outbound metrics -------------------------------------------------

    def _emit(self, record) -> None:
        self._records.append(record.to_dict())
        self.emitted += 1
        if len(self._records) >= protocol.BATCH_MAX_RECORDS:
            self._wake.set()

    async def _send_batch(self) -> None:
        records = self._records[: protocol.BATCH_MAX_RECORDS]
        del self._records[: len(records)]
        counters, self._counters = self._counters, []
        extra = {}
        if self._omitted:
            extra["omitted"], self._omitted = self._omitted, []
        await self.channel.send(protocol.METRIC_BATCH, seq=self.seq, records=records, counters=counters, **extra)
        self.seq += 1

    async def _flusher(self) -> None:
        loop = asyncio.get_running_loop()
        due = loop.time() + protocol.BATCH_INTERVAL_S
        while True:
            timeout = due - loop.time()
            if timeout > 0 and not self._closing:
                try:
                    await asyncio.wait_for(self._wake.wait(), timeout)
                except asyncio.TimeoutError:
                    pass
            self._wake.clear()
            while len(self._records) >= protocol.BATCH_MAX_RECORDS:
                await self._send_batch()
            if self._closing:
                while self._records or self._counters:
                    await self._send_batch()
                return
            if loop.time() >= due:
                await self._send_batch()
                due = loop.time() + protocol.BATCH_INTERVAL_S

    async def _monitor(self) -> None:
        try:
            counters = HostCounters()
        except LodestarError as exc:
            log.warning("monitoring disabled: %s", exc)
            self._omitted.extend(["available_mbytes", "pages_per_sec", "cpu_percent"])
            return
        self._omitted.extend(counters.omitted)
        async for sample in sample_counters(float(self.monitor_interval_ms), self.stop, "agent", counters):
            self._counters.append(sample.to_dict())

    # -- inbound control --------------------------------------------------

    async def _reader(self) -> None:
        try:
            while True:
                msg = await self.channel.recv()
                kind = msg["type"]
                if kind == protocol.RDV_RELEASE:
                    self.rendezvous.released(msg["name"], msg.get("cohort", []), msg.get("time_ms"))
                elif kind == protocol.STOP:
                    self.stop.set()
                elif kind == protocol.ABORT:
                    self._abort_vusers()
        except (asyncio.IncompleteReadError, ConnectionError, protocol.ProtocolError):
            # controller vanished: nobody left to report to
            self._abort_vusers()

    def _abort_vusers(self) -> None:
        self.stop.set()
        self.abort.set()
        for task in self._vusers:
            task.cancel()

    # -- vusers -----------------------------------------------------------

    async def _notify(self, **fields) -> None:
        try:
            await self.channel.send(protocol.VUSERS, **fields)
        except (ConnectionError, OSError):
            pass

    async def _vuser(self, vuser_id: int, group: str, offset_ms: float, deadline_ms: float | None) -> None:
        if self.virtual:
            clock = VirtualClock(self.t0_wall_ms, int(offset_ms * _NS_PER_MS))
            deadline_ns = None if deadline_ms is None else int(deadline_ms * _NS_PER_MS)
        else:
            clock = RealClock()
            await clock.sleep_until(self._t0_ns + int(offset_ms * _NS_PER_MS))
            deadline_ns = None if deadline_ms is None else self._t0_ns + int(deadline_ms * _NS_PER_MS)
        if self.stop.is_set():
            # never started, but the controller counts it from the plan
            await self._notify(down=[vuser_id])
            return
        ctx = VuserContext(
            vuser_id, group, self.target, self.run_id, self.seed, timeout_s=self.timeout_s,
            stop=self.stop, abort=self.abort,
        )
        await self._notify(up=[vuser_id])
        try:
            await run_vuser_loop(
                self.scripts[group], ctx, clock,
                iterations=self.schedule.get("iterations"),
                deadline_ns=deadline_ns,
                pacing_ms=float(self.schedule.get("pacing_ms", 0)),
                rendezvous_client=self.rendezvous,
                emit=self._emit,
            )
        except AbortSignal:
            pass
        finally:
            await self._notify(down=[vuser_id])

    async def _watchdog(self, deadline_ms: float | None) -> None:
        loop = asyncio.get_running_loop()
        if deadline_ms is None or self.virtual:
            await self.stop.wait()
        else:
            end = self._t0_loop + deadline_ms / 1000.0
            try:
                await asyncio.wait_for(self.stop.wait(), max(0.0, end - loop.time()))
            except asyncio.TimeoutError:
                pass
        await asyncio.sleep(GRACE_S)
        log.warning("grace period over; aborting remaining vusers")
        self._abort_vusers()

    async def run(self) -> None:
        loop = asyncio.get_running_loop()
        self._t0_loop = loop.time()
        self._t0_ns = RealClock().now_ns()
        starts = self.schedule.get("starts", [])
        deadline_ms = self.schedule.get("deadline_ms")
        reader = asyncio.create_task(self._reader())
        flusher = asyncio.create_task(self._flusher())
        monitor = asyncio.create_task(self._monitor()) if self.monitor_interval_ms else None
        watchdog = asyncio.create_task(self._watchdog(deadline_ms))
        try:
            self._vusers = [
                asyncio.create_task(self._vuser(int(vid), group, float(offset), deadline_ms))
                for offset, vid, group in starts
            ]
            if self._vusers:
                await asyncio.gather(*self._vusers, return_exceptions=True)
            elif monitor is not None:
                await self.stop.wait()
        finally:
            watchdog.cancel()
            self.stop.set()
            if monitor is not None:
                await asyncio.gather(monitor, return_exceptions=True)
            self._closing = True
            self._wake.set()
            try:
                await flusher
                await self.channel.send(protocol.BYE, emitted=self.emitted, batches=self.seq)
            except (ConnectionError, OSError):
                log.warning("controller connection lost before BYE")
            reader.cancel()
            await asyncio.gather(reader, watchdog, return_exceptions=True)


class Agent:
    """TCP server accepting controller sessions."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, capacity: int = 1000, tag: str = "default"):
        self.host = host
        self.port = port
        self.capacity = capacity
        self.tag = tag
        self._server: asyncio.base_events.Server | None = None
        self._sessions: set[asyncio.Task] = set()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def start(self) -> "Agent":
        self._server = await asyncio.start_server(self._handle, self.host, self.port, limit=2**20)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._sessions):
            task.cancel()
        await asyncio.gather(*self._sessions, return_exceptions=True)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._sessions.add(task)
        channel = protocol.Channel(reader, writer)
        try:
            await channel.send(protocol.HELLO, tag=self.tag, capacity=self.capacity)
            assign = await channel.recv()
            if assign["type"] != protocol.ASSIGN:
                raise protocol.ProtocolError(f"expected ASSIGN, got {assign['type']}")
            start = await channel.recv()
            if start["type"] != protocol.START:
                raise protocol.ProtocolError(f"expected START, got {start['type']}")
            n = len(start.get("schedule", {}).get("starts", []))
            if n > self.capacity:
                log.error("assignment of %d vusers exceeds capacity %d", n, self.capacity)
                await channel.send(protocol.BYE, emitted=0, batches=0, error="capacity exceeded")
                return
            await Session(channel, assign, start).run()
        except (asyncio.IncompleteReadError, ConnectionError):
            log.info("controller %s disconnected", channel.peer)
        except LodestarError as exc:
            log.error("session failed: %s", exc)
        finally:
            self._sessions.discard(task)
            await channel.close()
