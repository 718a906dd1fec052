"""Host resource counters sampled while a run is in progress."""

from __future__ import annotations

import asyncio
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, AsyncIterator

from . import protocol
from .errors import ConnectError, StaleRun, UnsupportedPlatform

log = logging.getLogger(__name__)

AVAILABLE_MBYTES = "available_mbytes"
PAGES_PER_SEC = "pages_per_sec"
CPU_PERCENT = "cpu_percent"
COUNTERS = (AVAILABLE_MBYTES, PAGES_PER_SEC, CPU_PERCENT)

MIN_INTERVAL_MS = 100


@dataclass(frozen=True)
class CounterSample:
    host: str
    counter: str
    timestamp_ms: int
    value: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CounterSample":
        return cls(str(d["host"]), str(d["counter"]), int(d["timestamp_ms"]), float(d["value"]))


def _read_page_faults() -> int | None:
    vmstat = Path("/proc/vmstat")
    if not vmstat.exists():
        return None
    try:
        for line in vmstat.read_text().splitlines():
            key, _, value = line.partition(" ")
            if key == "pgfault":
                return int(value)
    except (OSError, ValueError):
        return None
    return None


class HostCounters:
    """Reads the counter set from the OS; counters the platform lacks are omitted."""

    def __init__(self):
        try:
            import psutil
        except ImportError:  # pragma: no cover - psutil is a hard dependency
            psutil = None
        self._psutil = psutil
        self.omitted: list[str] = []
        if psutil is None:
            self.omitted += [AVAILABLE_MBYTES, CPU_PERCENT]
        else:
            psutil.cpu_percent(interval=None)  # prime: first call has no reference point
        self._faults = _read_page_faults()
        self._faults_at = time.monotonic()
        if self._faults is None:
            self.omitted.append(PAGES_PER_SEC)
        if len(self.omitted) == len(COUNTERS):
            raise UnsupportedPlatform(f"no counter source on {sys.platform}")

    def read(self) -> dict[str, float]:
        out: dict[str, float] = {}
        if self._psutil is not None:
            out[AVAILABLE_MBYTES] = max(0.0, self._psutil.virtual_memory().available / 2**20)
            out[CPU_PERCENT] = min(100.0, max(0.0, float(self._psutil.cpu_percent(interval=None))))
        if self._faults is not None:
            faults = _read_page_faults()
            now = time.monotonic()
            if faults is not None and now > self._faults_at:
                out[PAGES_PER_SEC] = max(0, faults - self._faults) / (now - self._faults_at)
                self._faults, self._faults_at = faults, now
        return {k: v for k, v in out.items() if math.isfinite(v)}


async def sample_counters(
    interval_ms: float,
    stop: asyncio.Event,
    host: str = "local",
    counters: HostCounters | None = None,
) -> AsyncIterator[CounterSample]:
    """Yield one sample per counter per tick until ``stop`` is set."""
    if interval_ms < MIN_INTERVAL_MS:
        raise ValueError(f"interval must be >= {MIN_INTERVAL_MS}ms")
    counters = counters or HostCounters()
    start = time.monotonic()
    last_ts: dict[str, int] = {}
    tick = 1
    while not stop.is_set():
        due = start + tick * interval_ms / 1000.0
        try:
            await asyncio.wait_for(stop.wait(), timeout=max(0.0, due - time.monotonic()))
            return
        except asyncio.TimeoutError:
            pass
        tick += 1
        ts = time.time_ns() // 1_000_000
        for name, value in counters.read().items():
            # strictly increasing per counter even if the wall clock stalls
            ts_c = max(ts, last_ts.get(name, ts - 1) + 1)
            last_ts[name] = ts_c
            yield CounterSample(host, name, ts_c, value)


class MonitorHandle:
    def __init__(self, host: str):
        self.host = host
        self._task: asyncio.Task | None = None
        self._stop = asyncio.Event()

    async def detach(self) -> None:
        self._stop.set()
        if self._task is not None:
            await self._task


class _LocalMonitor(MonitorHandle):
    def __init__(self, run, interval_ms: float):
        super().__init__("local")
        try:
            counters = HostCounters()
        except UnsupportedPlatform as exc:
            log.warning("monitoring disabled: %s", exc)
            for name in COUNTERS:
                run.note_omission("local", name)
            return
        for name in counters.omitted:
            run.note_omission("local", name)
        self._task = asyncio.create_task(self._pump(run, counters, interval_ms))

    async def _pump(self, run, counters: HostCounters, interval_ms: float) -> None:
        async for sample in sample_counters(interval_ms, self._stop, "local", counters):
            run.add_counters([sample])


class _RemoteMonitor(MonitorHandle):
    """Monitor-only fleet session: an empty ASSIGN plus START carrying the interval."""

    def __init__(self, run, address: str, channel: protocol.Channel):
        super().__init__(address)
        self._channel = channel
        self._run = run
        self._task = asyncio.create_task(self._pump())

    async def _pump(self) -> None:
        try:
            while True:
                msg = await self._channel.recv()
                if msg["type"] == protocol.METRIC_BATCH:
                    for name in msg.get("omitted", []):
                        self._run.note_omission(self.host, name)
                    self._run.add_counters(
                        [CounterSample(self.host, c["counter"], int(c["timestamp_ms"]), float(c["value"]))
                         for c in msg.get("counters", [])]
                    )
                elif msg["type"] == protocol.BYE:
                    break
        except (asyncio.IncompleteReadError, ConnectionError):
            log.warning("monitor connection to %s closed", self.host)
        finally:
            await self._channel.close()

    async def detach(self) -> None:
        if self._task is not None and not self._task.done():
            try:
                await self._channel.send(protocol.STOP)
            except (ConnectionError, OSError):
                pass
            await self._task


async def attach_monitor(run, target: str = "local", interval_ms: float = 1000) -> MonitorHandle:
    """Start feeding host counters into ``run``'s counter store.

    ``target`` is ``"local"`` or an agent's ``host:port``.
    """
    if run.finished:
        raise StaleRun("cannot attach a monitor to a finished run")
    if interval_ms < MIN_INTERVAL_MS:
        raise ValueError(f"interval must be >= {MIN_INTERVAL_MS}ms")
    if target == "local":
        handle: MonitorHandle = _LocalMonitor(run, interval_ms)
    else:
        host, port = protocol.split_address(target)
        try:
            channel = await protocol.open_channel(host, port, timeout_s=5.0)
            hello = await asyncio.wait_for(channel.recv(), 5.0)
            if hello["type"] != protocol.HELLO:
                raise ConnectError(f"{target}: expected HELLO, got {hello['type']}")
            await channel.send(protocol.ASSIGN, run_id=run.run_id, groups=[])
            await channel.send(protocol.START, schedule={}, monitor_interval_ms=interval_ms)
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
            raise ConnectError(f"cannot reach agent {target}: {exc!r}") from exc
        handle = _RemoteMonitor(run, target, channel)
    run.monitors.append(handle)
    return handle
