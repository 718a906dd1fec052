"""Rendezvous (set-point) coordination.

:class:`RendezvousCore` is the pure decision function over (waiting set, running
population, policy, time). :class:`Coordinator` drives it from the event loop,
owns the inter-arrival timers and fans releases out to listeners.
"""

from __future__ import annotations

import asyncio
import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

from .errors import InvalidDocument, UnknownRendezvous

DEFAULT_TIMEOUT_MS = 30_000.0


@dataclass(frozen=True)
class RendezvousPolicy:
    name: str
    quorum: str = "all"  # "all" | "fraction" | "count"
    value: float = 1.0
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    enabled: bool = True

    def __post_init__(self):
        if self.quorum not in ("all", "fraction", "count"):
            raise InvalidDocument(f"rendezvous {self.name!r}: unknown quorum {self.quorum!r}")
        if self.quorum == "fraction" and not 0 < self.value <= 1:
            raise InvalidDocument(f"rendezvous {self.name!r}: fraction must be in (0, 1]")
        if self.quorum == "count" and (self.value < 1 or self.value != int(self.value)):
            raise InvalidDocument(f"rendezvous {self.name!r}: count must be an integer >= 1")
        if not self.timeout_ms > 0:
            raise InvalidDocument(f"rendezvous {self.name!r}: timeout must be > 0")

    def needed(self, population: int) -> int:
        if self.quorum == "all":
            n = population
        elif self.quorum == "fraction":
            n = math.ceil(self.value * population)
        else:
            n = min(int(self.value), population)
        return max(1, n)

    @classmethod
    def from_json(cls, name: str, obj: Mapping[str, Any]) -> "RendezvousPolicy":
        if not isinstance(obj, Mapping):
            raise InvalidDocument(f"rendezvous {name!r}: policy must be an object")
        q = obj.get("quorum", "all")
        if q == "all":
            kind, value = "all", 1.0
        elif isinstance(q, Mapping) and len(q) == 1 and next(iter(q)) in ("fraction", "count"):
            (kind, value), = q.items()
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidDocument(f"rendezvous {name!r}: quorum {kind} must be numeric")
        else:
            raise InvalidDocument(f"rendezvous {name!r}: quorum must be 'all', {{'fraction': f}} or {{'count': k}}")
        return cls(
            name,
            kind,
            float(value),
            float(obj.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
            bool(obj.get("enabled", True)),
        )

    def to_json(self) -> dict[str, Any]:
        if self.quorum == "all":
            quorum: Any = "all"
        elif self.quorum == "count":
            quorum = {"count": int(self.value)}
        else:
            quorum = {"fraction": self.value}
        return {"quorum": quorum, "timeout_ms": self.timeout_ms, "enabled": self.enabled}


@dataclass(frozen=True)
class Release:
    name: str
    cohort: frozenset[int]
    time_ms: float
    reason: str  # "quorum" | "timeout" | "disabled" | "departure"


class RendezvousCore:
    """Release rule for every rendezvous of one run. All times are in ms."""

    def __init__(
        self,
        policies: Mapping[str, RendezvousPolicy],
        groups_for: Mapping[str, Iterable[str]] | None = None,
    ):
        self.policies = dict(policies)
        # rendezvous name -> groups whose scripts reference it; absent means every group
        self.groups_for = {k: set(v) for k, v in (groups_for or {}).items()}
        self.running: dict[int, str] = {}
        self.waiting: dict[str, dict[int, float]] = {name: {} for name in self.policies}
        self.last_arrival: dict[str, float] = {}

    def population(self, name: str) -> int:
        groups = self.groups_for.get(name)
        if groups is None:
            return len(self.running)
        return sum(1 for g in self.running.values() if g in groups)

    def _release(self, name: str, now: float, reason: str) -> Release:
        cohort = frozenset(self.waiting[name])
        self.waiting[name] = {}
        self.last_arrival.pop(name, None)
        return Release(name, cohort, now, reason)

    def _evaluate(self, name: str, now: float, reason: str = "quorum") -> Release | None:
        waiting = self.waiting[name]
        if waiting and len(waiting) >= self.policies[name].needed(self.population(name)):
            return self._release(name, now, reason)
        return None

    def start(self, vuser_id: int, group: str) -> None:
        self.running[vuser_id] = group

    def stop(self, vuser_id: int, now: float) -> list[Release]:
        """A vuser left the run: drop it from every waiting set and re-check quorums."""
        self.running.pop(vuser_id, None)
        out = []
        for name, waiting in self.waiting.items():
            if waiting.pop(vuser_id, None) is not None and not waiting:
                self.last_arrival.pop(name, None)
            rel = self._evaluate(name, now, "departure")
            if rel is not None:
                out.append(rel)
        return out

    def arrive(self, vuser_id: int, name: str, now: float) -> Release | None:
        policy = self.policies.get(name)
        if policy is None:
            raise UnknownRendezvous(name)
        if not policy.enabled:
            return Release(name, frozenset({vuser_id}), now, "disabled")
        self.waiting[name][vuser_id] = now
        self.last_arrival[name] = now
        return self._evaluate(name, now)

    def deadline(self, name: str) -> float | None:
        if name not in self.last_arrival:
            return None
        return self.last_arrival[name] + self.policies[name].timeout_ms

    def next_deadline(self) -> float | None:
        deadlines = [d for d in (self.deadline(n) for n in self.last_arrival) if d is not None]
        return min(deadlines) if deadlines else None

    def expire(self, now: float) -> list[Release]:
        out = []
        for name in list(self.last_arrival):
            due = self.deadline(name)
            if due is not None and due <= now and self.waiting[name]:
                out.append(self._release(name, now, "timeout"))
        return out


class Coordinator:
    """Event-loop front end for :class:`RendezvousCore`.

    Arrivals, departures and timer expiry all run on the owning loop, so the
    core sees them strictly one at a time.
    """

    def __init__(
        self,
        policies: Mapping[str, RendezvousPolicy],
        groups_for: Mapping[str, Iterable[str]] | None = None,
        clock: Callable[[], float] | None = None,
    ):
        self.core = RendezvousCore(policies, groups_for)
        self._clock = clock
        self.listeners: list[Callable[[Release], None]] = []
        self.releases: list[Release] = []
        self.arrivals: list[tuple[int, str, float]] = []
        self._timer: asyncio.TimerHandle | None = None

    def now_ms(self) -> float:
        if self._clock is not None:
            return self._clock()
        return asyncio.get_running_loop().time() * 1000.0

    def _publish(self, releases: Iterable[Release]) -> None:
        for rel in releases:
            self.releases.append(rel)
            for listener in list(self.listeners):
                listener(rel)
        self._reschedule()

    def _reschedule(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        due = self.core.next_deadline()
        if due is not None:
            loop = asyncio.get_running_loop()
            self._timer = loop.call_at(due / 1000.0, self._on_timer)

    def _on_timer(self) -> None:
        self._timer = None
        now = self.now_ms()
        due = self.core.next_deadline()
        if due is not None and now < due:
            # fired a hair early relative to the ms clock
            self._reschedule()
            return
        self._publish(self.core.expire(now))

    def start(self, vuser_id: int, group: str) -> None:
        self.core.start(vuser_id, group)

    def stop(self, vuser_id: int) -> None:
        self._publish(self.core.stop(vuser_id, self.now_ms()))

    def arrive(self, vuser_id: int, name: str) -> Release | None:
        now = self.now_ms()
        self.arrivals.append((vuser_id, name, now))
        rel = self.core.arrive(vuser_id, name, now)
        self._publish([rel] if rel else [])
        return rel

    def close(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None


class LocalRendezvousClient:
    """In-process client: vusers await their cohort's release future."""

    def __init__(self, coordinator: Coordinator):
        self.coordinator = coordinator
        self._pending: dict[tuple[str, int], asyncio.Future] = {}
        coordinator.listeners.append(self._on_release)

    def _on_release(self, rel: Release) -> None:
        for vid in rel.cohort:
            fut = self._pending.pop((rel.name, vid), None)
            if fut is not None and not fut.done():
                fut.set_result(rel)

    async def arrive(self, vuser_id: int, name: str) -> Release:
        fut = asyncio.get_running_loop().create_future()
        self._pending[(name, vuser_id)] = fut
        self.coordinator.arrive(vuser_id, name)
        try:
            return await fut
        finally:
            self._pending.pop((name, vuser_id), None)
