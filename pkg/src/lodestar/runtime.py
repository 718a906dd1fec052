"""Virtual-user execution: runs resolved steps, times transactions, emits records."""

from __future__ import annotations

import asyncio
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, ClassVar, Protocol
from urllib.parse import parse_qs, urlsplit

import aiohttp

from .errors import AbortSignal, RequestError
from .scripting import (
    EndTransaction,
    Rendezvous,
    Request,
    Script,
    StartTransaction,
    Step,
    Think,
    bind_parameters,
)

PASS = "PASS"
FAIL = "FAIL"

_NS_PER_MS = 1_000_000


@dataclass(frozen=True)
class TransactionRecord:
    run_id: str
    group: str
    vuser_id: int
    transaction: str
    start_ns: int
    end_ns: int
    wall_start_ms: int
    status: str
    connect_ms: float = 0.0

    @property
    def duration_ms(self) -> float:
        return (self.end_ns - self.start_ns) / _NS_PER_MS

    @property
    def wall_end_ns(self) -> int:
        """Completion time on the wall clock, derived from the monotonic duration."""
        return self.wall_start_ms * _NS_PER_MS + (self.end_ns - self.start_ns)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransactionRecord":
        return cls(
            str(d["run_id"]),
            str(d["group"]),
            int(d["vuser_id"]),
            str(d["transaction"]),
            int(d["start_ns"]),
            int(d["end_ns"]),
            int(d["wall_start_ms"]),
            str(d["status"]),
            float(d.get("connect_ms", 0.0) or 0.0),
        )


# ---------------------------------------------------------------------------
# clocks


class Clock(Protocol):
    def now_ns(self) -> int: ...

    def wall_ms(self) -> int: ...

    async def sleep(self, ms: float) -> None: ...

    async def sleep_until(self, ns: int) -> None: ...


class RealClock:
    """Monotonic clock for durations; wall time is metadata only."""

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def wall_ms(self) -> int:
        return time.time_ns() // _NS_PER_MS

    async def sleep_until(self, ns: int) -> None:
        # asyncio may wake a hair early; loop until the deadline has really passed
        while True:
            remaining = ns - time.monotonic_ns()
            if remaining <= 0:
                return
            await asyncio.sleep(remaining / 1e9)

    async def sleep(self, ms: float) -> None:
        if ms <= 0:
            await asyncio.sleep(0)
            return
        await self.sleep_until(time.monotonic_ns() + int(ms * _NS_PER_MS))


class VirtualClock:
    """Simulated time: sleeping advances the clock instead of waiting.

    Used with mock targets so runs are fast and bit-for-bit reproducible.
    """

    def __init__(self, origin_wall_ms: int, start_ns: int = 0):
        self.origin_wall_ms = origin_wall_ms
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def wall_ms(self) -> int:
        return self.origin_wall_ms + self._now // _NS_PER_MS

    async def sleep_until(self, ns: int) -> None:
        self._now = max(self._now, ns)
        await asyncio.sleep(0)

    async def sleep(self, ms: float) -> None:
        await self.sleep_until(self._now + int(max(ms, 0) * _NS_PER_MS))


# ---------------------------------------------------------------------------
# transports


@dataclass
class Response:
    status: int
    connect_ms: float = 0.0


def _join(base_url: str, url: str) -> str:
    if url.startswith(("http://", "https://")):
        return url
    if not url.startswith("/"):
        url = "/" + url
    return base_url.rstrip("/") + url


class HttpTransport:
    """One keep-alive pool and cookie jar; a fresh instance per vuser iteration."""

    def __init__(self, base_url: str, timeout_s: float = 30.0):
        self.base_url = base_url
        self.timeout_s = timeout_s
        self._session: aiohttp.ClientSession | None = None
        self._connect_started = 0.0
        self._connect_ms = 0.0

    async def open(self) -> None:
        trace = aiohttp.TraceConfig()
        trace.on_connection_create_start.append(self._on_connect_start)
        trace.on_connection_create_end.append(self._on_connect_end)
        self._session = aiohttp.ClientSession(
            connector=aiohttp.TCPConnector(limit=4, force_close=False),
            cookie_jar=aiohttp.CookieJar(unsafe=True),
            timeout=aiohttp.ClientTimeout(total=self.timeout_s),
            trace_configs=[trace],
        )

    async def close(self) -> None:
        if self._session is not None:
            await self._session.close()
            self._session = None

    async def _on_connect_start(self, session, ctx, params) -> None:
        self._connect_started = time.perf_counter()

    async def _on_connect_end(self, session, ctx, params) -> None:
        self._connect_ms += (time.perf_counter() - self._connect_started) * 1000

    async def request(self, step: Request) -> Response:
        assert self._session is not None, "transport not opened"
        self._connect_ms = 0.0
        data = step.body.encode() if step.body is not None else None
        try:
            async with self._session.request(
                step.method, _join(self.base_url, step.url), headers=dict(step.headers), data=data
            ) as resp:
                await resp.read()
                return Response(resp.status, self._connect_ms)
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
            raise RequestError(f"{step.method} {step.url}: {exc!r}") from exc


class MockTransport:
    """Answers instantly in real time; ``latency_ms`` is spent on the vuser's clock.

    Every request is appended to the class-wide ``journal`` so tests can check
    parameter bindings without a server.
    """

    journal: ClassVar[list[tuple[int, str, str, str | None]]] = []

    def __init__(self, vuser_id: int, clock: Clock, latency_ms: float = 0.0, status: int = 200):
        self.vuser_id = vuser_id
        self.clock = clock
        self.latency_ms = latency_ms
        self.status = status

    @classmethod
    def reset_journal(cls) -> None:
        cls.journal.clear()

    async def open(self) -> None:
        pass

    async def close(self) -> None:
        pass

    async def request(self, step: Request) -> Response:
        MockTransport.journal.append((self.vuser_id, step.method, step.url, step.body))
        await self.clock.sleep(self.latency_ms)
        return Response(self.status)


def is_mock_target(base_url: str) -> bool:
    return base_url.startswith("mock:")


def mock_options(base_url: str) -> dict[str, float]:
    query = parse_qs(urlsplit(base_url).query)
    return {
        "latency_ms": float(query.get("latency_ms", ["1"])[0]),
        "status": int(query.get("status", ["200"])[0]),
    }


def make_transport(base_url: str, vuser_id: int, clock: Clock, timeout_s: float = 30.0):
    if is_mock_target(base_url):
        opts = mock_options(base_url)
        return MockTransport(vuser_id, clock, opts["latency_ms"], int(opts["status"]))
    return HttpTransport(base_url, timeout_s)


# ---------------------------------------------------------------------------
# execution


class RendezvousClient(Protocol):
    async def arrive(self, vuser_id: int, name: str) -> Any: ...


@dataclass
class VuserContext:
    vuser_id: int
    group: str
    base_url: str
    run_id: str = "run"
    seed: int = 0
    iteration: int = 0
    timeout_s: float = 30.0
    transport: Any = None
    stop: asyncio.Event | None = None
    abort: asyncio.Event | None = None
    transport_factory: Callable[..., Any] | None = None

    def new_transport(self, clock: Clock):
        factory = self.transport_factory or make_transport
        return factory(self.base_url, self.vuser_id, clock, self.timeout_s)


@dataclass
class _OpenTx:
    start_ns: int
    wall_ms: int
    failed: bool = False
    connect_ms: float = 0.0


def _status_ok(step: Request, status: int) -> bool:
    if step.assert_status is None:
        return status < 400
    return status in step.assert_status


async def execute_script(
    steps: tuple[Step, ...] | list[Step],
    context: VuserContext,
    clock: Clock,
    rendezvous_client: RendezvousClient | None = None,
    emit: Callable[[TransactionRecord], None] | None = None,
) -> list[TransactionRecord]:
    """Run one resolved step list for one vuser.

    A request error fails every open transaction and skips ahead to the end
    marker of the innermost one; markers met while skipping are still honoured
    so the record count never changes.
    """
    records: list[TransactionRecord] = []
    open_tx: dict[str, _OpenTx] = {}
    skip_until: str | None = None
    transport = context.transport

    def finish(name: str, start_ns: int, wall: int, failed: bool, connect_ms: float) -> None:
        rec = TransactionRecord(
            context.run_id,
            context.group,
            context.vuser_id,
            name,
            start_ns,
            clock.now_ns(),
            wall,
            FAIL if failed else PASS,
            round(connect_ms, 3),
        )
        records.append(rec)
        if emit is not None:
            emit(rec)

    for index, step in enumerate(steps):
        if context.abort is not None and context.abort.is_set():
            raise AbortSignal(f"vuser {context.vuser_id} aborted")
        if isinstance(step, StartTransaction):
            open_tx[step.name] = _OpenTx(clock.now_ns(), clock.wall_ms(), failed=skip_until is not None)
        elif isinstance(step, EndTransaction):
            tx = open_tx.pop(step.name)
            finish(step.name, tx.start_ns, tx.wall_ms, tx.failed, tx.connect_ms)
            if skip_until == step.name:
                skip_until = None
        elif skip_until is not None:
            continue
        elif isinstance(step, Think):
            await clock.sleep(step.lo_ms)
        elif isinstance(step, Rendezvous):
            if rendezvous_client is None:
                raise RuntimeError(f"step {index}: rendezvous {step.name!r} without a coordinator")
            await rendezvous_client.arrive(context.vuser_id, step.name)
        elif isinstance(step, Request):
            implicit = None if open_tx else (clock.now_ns(), clock.wall_ms())
            errored = False
            connect_ms = 0.0
            try:
                resp = await transport.request(step)
                ok = _status_ok(step, resp.status)
                connect_ms = resp.connect_ms
            except RequestError:
                ok = False
                errored = True
            if implicit is not None:
                finish(f"_step{index}", implicit[0], implicit[1], not ok, connect_ms)
                continue
            for tx in open_tx.values():
                tx.connect_ms += connect_ms
                if not ok:
                    tx.failed = True
            if errored:
                skip_until = next(reversed(open_tx))
    return records


async def run_vuser_loop(
    script: Script,
    context: VuserContext,
    clock: Clock,
    *,
    iterations: int | None = None,
    deadline_ns: int | None = None,
    pacing_ms: float = 0.0,
    rendezvous_client: RendezvousClient | None = None,
    emit: Callable[[TransactionRecord], None] | None = None,
) -> tuple[list[TransactionRecord], int]:
    """Repeat the script until ``iterations`` are done or ``deadline_ns`` passes.

    The in-flight iteration always finishes; no iteration starts at or after the
    deadline. Iteration k never starts before loop start + k * pacing.
    """
    if iterations is None and deadline_ns is None:
        raise ValueError("need iterations or a deadline")
    if iterations is not None and iterations < 1:
        raise ValueError("iterations must be >= 1")
    records: list[TransactionRecord] = []
    loop_start = clock.now_ns()
    pacing_ns = int(pacing_ms * _NS_PER_MS)
    k = 0
    while iterations is None or k < iterations:
        if context.stop is not None and context.stop.is_set():
            break
        if context.abort is not None and context.abort.is_set():
            raise AbortSignal(f"vuser {context.vuser_id} aborted")
        if pacing_ns:
            target = loop_start + k * pacing_ns
            if deadline_ns is not None and target >= deadline_ns:
                break
            await clock.sleep_until(target)
        if deadline_ns is not None and clock.now_ns() >= deadline_ns:
            break
        context.iteration = k
        steps = bind_parameters(script, context.vuser_id, k, context.seed)
        transport = context.new_transport(clock)
        await transport.open()
        context.transport = transport
        try:
            records.extend(await execute_script(steps, context, clock, rendezvous_client, emit))
        finally:
            context.transport = None
            await transport.close()
        k += 1
    return records, k
