"""Scenario ("running scene") model, loading and the ramp law."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import (
    EmptySchedule,
    InvalidDocument,
    InvalidSchedule,
    MissingScript,
    UnknownRendezvous,
)
from .rendezvous import RendezvousPolicy
from .scripting import Script, load_script, parse_script

DEFAULT_GENERATOR = "default"
WARMUP_FRACTION = 0.10
WARMUP_MIN_MS = 1000.0


@dataclass(frozen=True)
class Group:
    name: str
    script: Script
    vusers: int
    generator: str = DEFAULT_GENERATOR
    script_path: str | None = None


@dataclass(frozen=True)
class Ramp:
    initial: int
    step_size: int = 1
    step_interval_ms: float = 1000.0


@dataclass(frozen=True)
class StepLoad:
    levels: tuple[int, ...]
    hold_ms: float

    @property
    def warmup_ms(self) -> float:
        return max(WARMUP_FRACTION * self.hold_ms, WARMUP_MIN_MS)

    def window(self, index: int) -> tuple[float, float]:
        """Measured window of level ``index`` relative to run start, in ms."""
        lo = index * self.hold_ms
        return lo + self.warmup_ms, lo + self.hold_ms


@dataclass(frozen=True)
class Schedule:
    ramp: Ramp | None = None
    iterations: int | None = None
    duration_ms: float | None = None
    step_load: StepLoad | None = None
    pacing_ms: float = 0.0

    @property
    def mode(self) -> str:
        if self.step_load is not None:
            return "step_load"
        return "iterations" if self.iterations is not None else "duration"


@dataclass(frozen=True)
class MonitorConfig:
    interval_ms: float = 1000.0
    hosts: tuple[str, ...] = ("local",)


@dataclass(frozen=True)
class Scenario:
    name: str
    groups: tuple[Group, ...]
    schedule: Schedule
    target: str
    seed: int = 0
    rendezvous: Mapping[str, RendezvousPolicy] = field(default_factory=dict)
    monitor: MonitorConfig | None = field(default_factory=MonitorConfig)
    timeout_ms: float = 30_000.0
    source: str | None = None

    @property
    def total_vusers(self) -> int:
        if self.schedule.step_load is not None:
            return self.schedule.step_load.levels[-1] if self.schedule.step_load.levels else 0
        return sum(g.vusers for g in self.groups)

    def groups_for_rendezvous(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {name: set() for name in self.rendezvous}
        for g in self.groups:
            for name in g.script.rendezvous_names():
                out.setdefault(name, set()).add(g.name)
        return out


# ---------------------------------------------------------------------------


def schedule_ramp(ramp: Ramp, target_count: int) -> list[tuple[float, int]]:
    """(start offset ms, vusers to start) events of the ramp law.

    Started vusers at time t equal min(target, initial + step_size * floor(t / interval)).
    """
    if target_count < ramp.initial:
        raise InvalidSchedule(f"ramp initial {ramp.initial} exceeds target {target_count}")
    if ramp.initial < 0:
        raise InvalidSchedule("ramp initial must be >= 0")
    events = [(0.0, ramp.initial)]
    started = ramp.initial
    k = 1
    while started < target_count:
        if ramp.step_size < 1 or ramp.step_interval_ms <= 0:
            raise InvalidSchedule("ramp needs step_size >= 1 and step_interval_ms > 0 to reach its target")
        n = min(ramp.step_size, target_count - started)
        events.append((k * ramp.step_interval_ms, n))
        started += n
        k += 1
    return events


def split_levels(levels: tuple[int, ...], weights: list[int]) -> list[list[int]]:
    """Per-level vuser counts per group, proportional to ``weights``.

    Counts never shrink from one level to the next: each extra vuser goes to
    the group furthest below its proportional share.
    """
    total_w = sum(weights)
    counts = [0] * len(weights)
    out = []
    current = 0
    for level in levels:
        while current < level:
            deficit = [w * (current + 1) / total_w - c for w, c in zip(weights, counts)]
            g = max(range(len(weights)), key=lambda i: (deficit[i], -i))
            counts[g] += 1
            current += 1
        out.append(list(counts))
    return out


# ---------------------------------------------------------------------------
# loading


def _num(obj: Mapping[str, Any], key: str, default=None, *, minimum=None, integer=False):
    value = obj.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise InvalidDocument(f"{key!r} must be a number")
    if integer and value != int(value):
        raise InvalidDocument(f"{key!r} must be an integer")
    if minimum is not None and value < minimum:
        raise InvalidDocument(f"{key!r} must be >= {minimum}")
    return int(value) if integer else float(value)


def _parse_schedule(raw: Any) -> Schedule:
    if not isinstance(raw, Mapping):
        raise InvalidDocument("'schedule' must be an object")
    ramp = None
    if raw.get("ramp") is not None:
        r = raw["ramp"]
        if not isinstance(r, Mapping):
            raise InvalidDocument("'ramp' must be an object")
        ramp = Ramp(
            _num(r, "initial", 0, minimum=0, integer=True),
            _num(r, "step_size", 1, minimum=1, integer=True),
            _num(r, "step_interval_ms", 1000),
        )
        if ramp.step_interval_ms <= 0:
            raise InvalidSchedule("ramp step_interval_ms must be > 0")
    modes = [k for k in ("iterations", "duration_ms", "step_load") if raw.get(k) is not None]
    if len(modes) != 1:
        raise InvalidSchedule("schedule needs exactly one of iterations, duration_ms, step_load")
    step_load = None
    if "step_load" in modes:
        sl = raw["step_load"]
        if not isinstance(sl, Mapping) or not isinstance(sl.get("levels"), list):
            raise InvalidSchedule("step_load needs a 'levels' list and 'hold_ms'")
        levels = sl["levels"]
        if not levels:
            raise EmptySchedule("step_load has no levels")
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in levels):
            raise InvalidSchedule("step_load levels must be positive integers")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvalidSchedule(f"step_load levels must be strictly ascending, got {levels}")
        hold = _num(sl, "hold_ms", minimum=0)
        if hold is None or hold <= WARMUP_MIN_MS:
            raise InvalidSchedule(f"step_load hold_ms must exceed the {WARMUP_MIN_MS:.0f}ms warm-up")
        step_load = StepLoad(tuple(levels), hold)
    return Schedule(
        ramp=ramp,
        iterations=_num(raw, "iterations", minimum=1, integer=True),
        duration_ms=_num(raw, "duration_ms", minimum=0),
        step_load=step_load,
        pacing_ms=_num(raw, "pacing_ms", 0, minimum=0),
    )


def scenario_from_dict(doc: Mapping[str, Any], base_dir: str | Path | None = None) -> Scenario:
    """Build and validate a Scenario; scripts are parsed transitively."""
    if not isinstance(doc, Mapping):
        raise InvalidDocument("scenario must be a JSON object")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise InvalidDocument("scenario needs a non-empty 'name'")
    target = doc.get("target")
    if not isinstance(target, str) or not target:
        raise InvalidDocument("scenario needs a 'target' base URL")
    raw_groups = doc.get("groups")
    if not isinstance(raw_groups, list):
        raise InvalidDocument("'groups' must be a list")
    groups = []
    for i, g in enumerate(raw_groups):
        if not isinstance(g, Mapping):
            raise InvalidDocument(f"group {i} must be an object")
        gname = g.get("name", f"group{i}")
        ref = g.get("script")
        if isinstance(ref, Mapping):
            script, path = parse_script(ref, base_dir=base), None
        elif isinstance(ref, str):
            path = base / ref
            if not path.is_file():
                raise MissingScript(path)
            script = load_script(path)
        else:
            raise InvalidDocument(f"group {gname!r} needs a 'script' path or inline script")
        vusers = _num(g, "vusers", 1, minimum=1, integer=True)
        groups.append(Group(str(gname), script, vusers, str(g.get("generator", DEFAULT_GENERATOR)),
                            str(ref) if path else None))
    if len({g.name for g in groups}) != len(groups):
        raise InvalidDocument("group names must be unique")

    schedule = _parse_schedule(doc.get("schedule", {}))
    raw_rdv = doc.get("rendezvous", {}) or {}
    if not isinstance(raw_rdv, Mapping):
        raise InvalidDocument("'rendezvous' must be an object")
    policies = {str(k): RendezvousPolicy.from_json(str(k), v) for k, v in raw_rdv.items()}
    for g in groups:
        for rdv in sorted(g.script.rendezvous_names()):
            if rdv not in policies:
                raise UnknownRendezvous(rdv)

    monitor: MonitorConfig | None = MonitorConfig()
    if "monitor" in doc:
        m = doc["monitor"]
        if m is None or m is False:
            monitor = None
        elif isinstance(m, Mapping):
            hosts = m.get("hosts", ["local"])
            if not isinstance(hosts, list) or not all(isinstance(h, str) for h in hosts):
                raise InvalidDocument("monitor hosts must be a list of strings")
            monitor = MonitorConfig(_num(m, "interval_ms", 1000, minimum=100), tuple(hosts))
        else:
            raise InvalidDocument("'monitor' must be an object or null")

    scenario = Scenario(
        name=name,
        groups=tuple(groups),
        schedule=schedule,
        target=target,
        seed=_num(doc, "seed", 0, minimum=0, integer=True),
        rendezvous=policies,
        monitor=monitor,
        timeout_ms=_num(doc, "timeout_ms", 30_000, minimum=1),
    )
    if schedule.ramp is not None and scenario.total_vusers:
        schedule_ramp(schedule.ramp, scenario.total_vusers)
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InvalidDocument(f"scenario file not found: {path}") from exc
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise InvalidDocument(f"{path}: not valid JSON: {exc}") from exc
    scenario = scenario_from_dict(doc, base_dir=path.parent)
    return replace(scenario, source=str(path))
