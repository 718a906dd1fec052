"""Controller: assigns vusers to agents, drives the run, collects metrics."""

from __future__ import annotations

import asyncio
import logging
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from . import protocol
from .agent import Agent
from .analysis import TransactionStats, step_load_stats
from .errors import (
    AgentLost,
    CapacityExceeded,
    ConnectError,
    EmptySchedule,
    EmptyScenario,
    InvalidSchedule,
    MissingAgent,
    ProtocolError,
)
from .monitor import CounterSample, MonitorHandle, attach_monitor
from .rendezvous import Coordinator, Release
from .runtime import FAIL, PASS, RealClock, TransactionRecord, is_mock_target
from .scenario import Ramp, Scenario, schedule_ramp, split_levels
from .scripting import serialize_script

log = logging.getLogger(__name__)

ABORT_DRAIN_S = 15.0


@dataclass(frozen=True)
class Assignment:
    address: str
    count: int
    lo: int
    hi: int  # inclusive; hi < lo when count == 0


def _address_key(address: str):
    host, port = protocol.split_address(address)
    return host, port


def assign_vusers(total: int, agents: Sequence[tuple[str, int]], base: int = 0) -> list[Assignment]:
    """Split ``total`` vusers over ``(address, capacity)`` agents.

    Even split with the remainder going to agents in ascending address order;
    an agent whose capacity caps its share passes the excess on to the rest.
    Each agent receives one contiguous block of vuser ids starting at ``base``.
    """
    if not agents:
        raise MissingAgent("no agent available")
    ordered = sorted(agents, key=lambda a: _address_key(a[0]))
    caps = [max(0, int(c)) for _, c in ordered]
    if total > sum(caps):
        raise CapacityExceeded(f"{total} vusers exceed total agent capacity {sum(caps)}")
    counts = [0] * len(ordered)
    remaining = total
    while remaining:
        active = [i for i in range(len(ordered)) if counts[i] < caps[i]]
        q, r = divmod(remaining, len(active))
        for j, i in enumerate(active):
            add = min(caps[i] - counts[i], q + (1 if j < r else 0))
            counts[i] += add
            remaining -= add
    out = []
    lo = base
    for (address, _), n in zip(ordered, counts):
        out.append(Assignment(address, n, lo, lo + n - 1))
        lo += n
    return out


def _interleave(orders: Iterable[list[int]]) -> list[int]:
    orders = [list(o) for o in orders]
    out = []
    for i in range(max((len(o) for o in orders), default=0)):
        out.extend(o[i] for o in orders if i < len(o))
    return out


@dataclass
class AgentLink:
    address: str
    tag: str
    capacity: int
    channel: protocol.Channel
    state: str = "connected"
    blocks: dict[str, tuple[int, int]] = field(default_factory=dict)
    starts: list[tuple[float, int, str]] = field(default_factory=list)
    next_seq: int = 0
    received: int = 0
    emitted: int | None = None
    seq_errors: int = 0

    @property
    def assigned(self) -> int:
        return sum(hi - lo + 1 for lo, hi in self.blocks.values())

    def owns(self, vuser_id: int) -> bool:
        return any(lo <= vuser_id <= hi for lo, hi in self.blocks.values())

    def roster(self) -> dict[str, Any]:
        return {
            "address": self.address,
            "tag": self.tag,
            "capacity": self.capacity,
            "state": self.state,
            "assigned": self.assigned,
            "emitted": self.emitted,
            "received": self.received,
            "batches": self.next_seq,
            "seq_contiguous": self.seq_errors == 0,
        }


@dataclass
class RunResult:
    records: list[TransactionRecord]
    counters: list[CounterSample]
    meta: dict[str, Any]

    @property
    def partial(self) -> bool:
        return bool(self.meta.get("partial"))

    @property
    def pass_count(self) -> int:
        return sum(1 for r in self.records if r.status == PASS)

    @property
    def fail_count(self) -> int:
        return sum(1 for r in self.records if r.status == FAIL)


def plan_starts(scenario: Scenario, links: list[AgentLink]) -> tuple[dict[int, str], float | None]:
    """Assign id blocks to links and fill each link's start list.

    Returns the vuser -> group map and the run deadline (ms after start, or None).
    """
    groups = scenario.groups
    sched = scenario.schedule
    if sched.step_load is not None:
        per_level = split_levels(sched.step_load.levels, [g.vusers for g in groups])
        totals = per_level[-1]
    else:
        per_level = None
        totals = [g.vusers for g in groups]

    remaining = {link.address: link.capacity for link in links}
    group_of: dict[int, str] = {}
    owner: dict[int, AgentLink] = {}
    orders: list[list[int]] = []
    base = 0
    for g, total in zip(groups, totals):
        cands = [link for link in links if link.tag in (g.generator, "*")]
        if not cands:
            raise MissingAgent(f"no connected agent with tag {g.generator!r} for group {g.name!r}")
        by_addr = {link.address: link for link in cands}
        blocks = []
        for a in assign_vusers(total, [(link.address, remaining[link.address]) for link in cands], base):
            if a.count == 0:
                continue
            link = by_addr[a.address]
            link.blocks[g.name] = (a.lo, a.hi)
            remaining[a.address] -= a.count
            ids = list(range(a.lo, a.hi + 1))
            blocks.append(ids)
            for vid in ids:
                group_of[vid] = g.name
                owner[vid] = link
        orders.append(_interleave(blocks))
        base += total

    starts: list[tuple[float, int, str]] = []
    if per_level is not None:
        hold = sched.step_load.hold_ms
        prev = [0] * len(groups)
        for level_index, counts in enumerate(per_level):
            for gi, g in enumerate(groups):
                for vid in orders[gi][prev[gi]:counts[gi]]:
                    starts.append((level_index * hold, vid, g.name))
            prev = counts
        deadline = hold * len(per_level)
    else:
        order = _interleave(orders)
        ramp = sched.ramp or Ramp(initial=len(order))
        pos = 0
        for offset, n in schedule_ramp(ramp, len(order)):
            for vid in order[pos:pos + n]:
                starts.append((offset, vid, group_of[vid]))
            pos += n
        deadline = sched.duration_ms
    for offset, vid, group in starts:
        owner[vid].starts.append((offset, vid, group))
    return group_of, deadline


class Run:
    """Controller-side state of one run; all of it lives on one event loop."""

    def __init__(self, scenario: Scenario, links: list[AgentLink], local_agent: Agent | None,
                 on_records: Callable[[list[TransactionRecord]], None] | None = None):
        self.scenario = scenario
        self.links = links
        self.local_agent = local_agent
        self.on_records = on_records
        self.run_id = uuid.uuid4().hex[:12]
        self.records: list[TransactionRecord] = []
        self.counters: list[CounterSample] = []
        self.omissions: set[tuple[str, str]] = set()
        self.monitors: list[MonitorHandle] = []
        self.finished = False
        self.lost: list[str] = []
        self.aborting = False
        self.group_of: dict[int, str] = {}
        self.deadline_ms: float | None = None
        self.t0_ms = 0
        self.t0_loop = 0.0
        self.end_ms = 0
        self.coordinator = Coordinator(scenario.rendezvous, scenario.groups_for_rendezvous())
        self.coordinator.listeners.append(self._on_release)
        self._readers: list[asyncio.Task] = []
        self._departed: set[int] = set()
        self._timers: list[asyncio.TimerHandle] = []
        self._sends: set[asyncio.Task] = set()

    # -- stores used by monitors -----------------------------------------

    def add_counters(self, samples: Iterable[CounterSample]) -> None:
        self.counters.extend(samples)

    def note_omission(self, host: str, counter: str) -> None:
        self.omissions.add((host, counter))

    # -- messaging ------------------------------------------------------

    def _send_soon(self, link: AgentLink, type_: str, **fields) -> None:
        async def send():
            try:
                await link.channel.send(type_, **fields)
            except (ConnectionError, OSError):
                pass

        task = asyncio.create_task(send())
        self._sends.add(task)
        task.add_done_callback(self._sends.discard)

    def _on_release(self, rel: Release) -> None:
        for link in self.links:
            cohort = sorted(v for v in rel.cohort if link.owns(v))
            if cohort and link.state in ("running", "connected"):
                self._send_soon(link, protocol.RDV_RELEASE, name=rel.name, cohort=cohort,
                                time_ms=rel.time_ms - self.t0_loop * 1000.0)

    def _ingest(self, link: AgentLink, msg: dict[str, Any]) -> None:
        seq = msg.get("seq")
        if seq != link.next_seq:
            link.seq_errors += 1
            log.error("agent %s: METRIC_BATCH seq %s, expected %s", link.address, seq, link.next_seq)
        link.next_seq = (seq if isinstance(seq, int) else link.next_seq) + 1
        records = [TransactionRecord.from_dict(r) for r in msg.get("records", [])]
        link.received += len(records)
        self.records.extend(records)
        if records and self.on_records is not None:
            self.on_records(records)
        for name in msg.get("omitted", []):
            self.note_omission(link.address, name)
        self.counters.extend(
            CounterSample(link.address, c["counter"], int(c["timestamp_ms"]), float(c["value"]))
            for c in msg.get("counters", [])
        )

    async def _read(self, link: AgentLink) -> None:
        try:
            while True:
                msg = await link.channel.recv()
                kind = msg["type"]
                if kind == protocol.METRIC_BATCH:
                    self._ingest(link, msg)
                elif kind == protocol.RDV_ARRIVE:
                    self.coordinator.arrive(int(msg["vuser"]), msg["name"])
                elif kind == protocol.VUSERS:
                    for vid in msg.get("up", []):
                        self._vuser_started(int(vid))
                    for vid in msg.get("down", []):
                        self._departed.add(int(vid))
                        self.coordinator.stop(int(vid))
                elif kind == protocol.BYE:
                    link.emitted = int(msg.get("emitted", 0))
                    link.state = "done"
                    if msg.get("error"):
                        log.error("agent %s: %s", link.address, msg["error"])
                        link.state = "failed"
                        self._lose(link)
                    return
        except (asyncio.IncompleteReadError, ConnectionError, ProtocolError, OSError) as exc:
            log.error("agent %s lost: %r", link.address, exc)
            link.state = "lost"
            self._lose(link)

    def _vuser_started(self, vid: int) -> None:
        if vid not in self._departed and not self.aborting:
            self.coordinator.start(vid, self.group_of.get(vid, ""))

    def _schedule_population(self, virtual: bool) -> None:
        """Count vusers as running from their planned start time.

        Agents confirm starts with VUSERS messages too, but those race with the
        first rendezvous arrivals; the plan does not.
        """
        loop = asyncio.get_running_loop()
        for link in self.links:
            for offset, vid, _ in link.starts:
                if virtual or offset <= 0:
                    self._vuser_started(vid)
                else:
                    self._timers.append(loop.call_at(self.t0_loop + offset / 1000.0, self._vuser_started, vid))

    def _lose(self, link: AgentLink) -> None:
        self.lost.append(link.address)
        for vid in [v for v in self.coordinator.core.running if link.owns(v)]:
            self.coordinator.stop(vid)
        self.abort()

    def abort(self) -> None:
        if self.aborting:
            return
        self.aborting = True
        for other in self.links:
            if other.state == "running":
                self._send_soon(other, protocol.ABORT)

    def stop(self) -> None:
        """Graceful stop: no new iterations; agents drain in-flight work."""
        for link in self.links:
            if link.state == "running":
                self._send_soon(link, protocol.STOP)

    # -- lifecycle ------------------------------------------------------

    async def _launch(self) -> None:
        self.group_of, self.deadline_ms = plan_starts(self.scenario, self.links)
        mon = self.scenario.monitor
        agent_interval = mon.interval_ms if mon is not None and "agents" in mon.hosts else None
        virtual = is_mock_target(self.scenario.target)
        active = [link for link in self.links if link.blocks]
        for link in self.links:
            if not link.blocks:
                link.state = "idle"
                await link.channel.close()
        for link in active:
            groups = [g for g in self.scenario.groups if g.name in link.blocks]
            docs = {g.name: serialize_script(g.script) for g in groups}
            await link.channel.send(
                protocol.ASSIGN,
                run_id=self.run_id,
                target=self.scenario.target,
                seed=self.scenario.seed,
                timeout_ms=self.scenario.timeout_ms,
                scripts={name: {k: v for k, v in doc.items() if k != "parameters"} for name, doc in docs.items()},
                bindings={name: doc["parameters"] for name, doc in docs.items()},
                id_block={name: list(block) for name, block in link.blocks.items()},
            )
        self.t0_ms = RealClock().wall_ms()
        self.t0_loop = asyncio.get_running_loop().time()
        self._schedule_population(virtual)
        for link in active:
            schedule = {
                "starts": [list(s) for s in sorted(link.starts)],
                "iterations": self.scenario.schedule.iterations,
                "deadline_ms": self.deadline_ms,
                "pacing_ms": self.scenario.schedule.pacing_ms,
            }
            await link.channel.send(protocol.START, schedule=schedule, t0_wall_ms=self.t0_ms,
                                    virtual=virtual, monitor_interval_ms=agent_interval)
            link.state = "running"
            self._readers.append(asyncio.create_task(self._read(link)))

    async def wait(self) -> RunResult:
        """Block until every agent said BYE (or was lost); raise AgentLost on loss."""
        pending = set(self._readers)
        while pending:
            timeout = ABORT_DRAIN_S if self.aborting else None
            done, pending = await asyncio.wait(pending, timeout=timeout, return_when=asyncio.FIRST_COMPLETED)
            if not done and self.aborting:
                log.error("agents did not drain after abort; closing connections")
                for task in pending:
                    task.cancel()
                break
        for handle in list(self.monitors):
            await handle.detach()
        for timer in self._timers:
            timer.cancel()
        self.coordinator.close()
        if self._sends:
            await asyncio.gather(*self._sends, return_exceptions=True)
        for link in self.links:
            await link.channel.close()
        if self.local_agent is not None:
            await self.local_agent.close()
        self.finished = True
        self.end_ms = RealClock().wall_ms()
        result = RunResult(self.records, self.counters, self.metadata())
        if self.lost:
            raise AgentLost(self.lost[0], result)
        return result

    def metadata(self) -> dict[str, Any]:
        sched = self.scenario.schedule
        conservation = all(
            link.seq_errors == 0 and (link.emitted is None or link.emitted == link.received)
            for link in self.links
        )
        return {
            "run_id": self.run_id,
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "target": self.scenario.target,
            "mode": sched.mode,
            "t0_ms": self.t0_ms,
            "end_ms": self.end_ms,
            "partial": bool(self.lost),
            "lost_agents": list(self.lost),
            "agents": [link.roster() for link in self.links],
            "conservation_ok": conservation,
            "step_load": None if sched.step_load is None else {
                "levels": list(sched.step_load.levels),
                "hold_ms": sched.step_load.hold_ms,
                "warmup_ms": sched.step_load.warmup_ms,
            },
            "counter_omissions": [f"{h}:{c}" for h, c in sorted(self.omissions)],
            "rendezvous": [
                {"name": r.name, "cohort": sorted(r.cohort), "reason": r.reason,
                 "time_ms": round(r.time_ms - self.t0_loop * 1000.0, 3)}
                for r in self.coordinator.releases
            ],
            "pass": sum(1 for r in self.records if r.status == PASS),
            "fail": sum(1 for r in self.records if r.status == FAIL),
        }


async def _connect(address: str) -> AgentLink:
    host, port = protocol.split_address(address)
    try:
        channel = await protocol.open_channel(host, port, timeout_s=5.0)
        hello = await asyncio.wait_for(channel.recv(), 5.0)
    except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
        raise ConnectError(f"cannot reach agent {address}: {exc!r}") from exc
    if hello["type"] != protocol.HELLO:
        raise ProtocolError(f"{address}: expected HELLO, got {hello['type']}")
    return AgentLink(address, str(hello.get("tag", "default")), int(hello.get("capacity", 0)), channel)


async def start_run(scenario: Scenario, agents: Sequence[str] | None = None, *,
                    on_records: Callable[[list[TransactionRecord]], None] | None = None) -> Run:
    """Connect to agents, assign vusers and send START. ``agents=None`` means local mode.

    Local mode runs an in-process agent reached over loopback, so it follows
    exactly the same protocol path as remote agents.
    """
    if not scenario.groups or scenario.total_vusers < 1:
        raise EmptyScenario(f"scenario {scenario.name!r} has no vusers")
    local_agent = None
    if agents is None:
        local_agent = await Agent(capacity=scenario.total_vusers, tag="*").start()
        agents = [local_agent.address]
    links: list[AgentLink] = []
    try:
        for address in sorted(agents, key=_address_key):
            links.append(await _connect(address))
        run = Run(scenario, links, local_agent, on_records)
        await run._launch()
    except BaseException:
        for link in links:
            await link.channel.close()
        if local_agent is not None:
            await local_agent.close()
        raise
    return run


async def run_scenario(scenario: Scenario, agents: Sequence[str] | None = None, *,
                       on_records: Callable[[list[TransactionRecord]], None] | None = None,
                       on_start: Callable[[Run], Any] | None = None) -> RunResult:
    run = await start_run(scenario, agents, on_records=on_records)
    mon = scenario.monitor
    try:
        if mon is not None:
            for host in mon.hosts:
                if host != "agents":
                    try:
                        await attach_monitor(run, host, mon.interval_ms)
                    except ConnectError as exc:
                        log.warning("monitor %s unavailable: %s", host, exc)
        if on_start is not None:
            on_start(run)
    except BaseException:
        run.abort()
        await asyncio.shield(run.wait())
        raise
    return await run.wait()


@dataclass
class StepLoadReport:
    rows: list[TransactionStats]
    result: RunResult

    def row(self, transaction: str, level: int) -> TransactionStats:
        for r in self.rows:
            if r.transaction == transaction and r.level == level:
                return r
        raise KeyError((transaction, level))


async def run_step_load(scenario: Scenario, agents: Sequence[str] | None = None, **kwargs) -> StepLoadReport:
    """Hold each vuser level in turn and aggregate its post-warm-up window."""
    sl = scenario.schedule.step_load
    if sl is None:
        raise InvalidSchedule("scenario is not in step_load mode")
    if not sl.levels:
        raise EmptySchedule("step_load has no levels")
    result = await run_scenario(scenario, agents, **kwargs)
    rows = step_load_stats(result.records, result.meta["t0_ms"], sl.levels, sl.hold_ms, sl.warmup_ms)
    return StepLoadReport(rows, result)
