"""Test scripts: the step model, the JSON document format and parameter binding.

A script document looks like::

    {
      "name": "search",
      "parameters": {"terms": {"policy": "unique", "file": "terms.csv"}},
      "steps": [
        {"start_tx": "search"},
        {"request": {"method": "GET", "url": "/search?q={{term}}", "assert_status": [200]}},
        {"end_tx": "search"},
        {"think_ms": [200, 800]}
      ]
    }

Parameter tables may also be given inline as ``{"policy": ..., "columns": [...],
"rows": [[...], ...]}``; that is the form :func:`serialize_script` produces.
"""

from __future__ import annotations

import csv
import io
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

from .errors import (
    EmptyTable,
    InvalidDocument,
    UnbalancedTransaction,
    UnboundParameter,
)

METHODS = ("GET", "POST", "PUT", "DELETE", "HEAD")
POLICIES = ("sequential", "unique", "random")

PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)?)\s*\}\}")
_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


@dataclass(frozen=True)
class Request:
    method: str
    url: str
    headers: Mapping[str, str] = field(default_factory=dict)
    body: str | None = None
    assert_status: frozenset[int] | None = None
    # literal requests are never template-expanded (used for recorded bodies containing "{{")
    literal: bool = False

    def templates(self) -> list[str]:
        if self.literal:
            return []
        out = [self.url, *self.headers.values()]
        if self.body is not None:
            out.append(self.body)
        return out


@dataclass(frozen=True)
class StartTransaction:
    name: str


@dataclass(frozen=True)
class EndTransaction:
    name: str


@dataclass(frozen=True)
class Rendezvous:
    name: str


@dataclass(frozen=True)
class Think:
    lo_ms: float
    hi_ms: float

    @property
    def fixed(self) -> bool:
        return self.lo_ms == self.hi_ms


Step = Union[Request, StartTransaction, EndTransaction, Rendezvous, Think]


@dataclass(frozen=True)
class ParameterTable:
    name: str
    policy: str
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    source: str | None = field(default=None, compare=False)

    def row_for(self, vuser_index: int, iteration: int, rng: random.Random) -> tuple[str, ...]:
        if not self.rows:
            raise EmptyTable(self.name)
        n = len(self.rows)
        if self.policy == "sequential":
            return self.rows[iteration % n]
        if self.policy == "unique":
            return self.rows[vuser_index % n]
        return self.rows[rng.randrange(n)]


@dataclass(frozen=True)
class Script:
    name: str
    steps: tuple[Step, ...]
    parameters: Mapping[str, ParameterTable] = field(default_factory=dict)

    def transaction_names(self) -> list[str]:
        return [s.name for s in self.steps if isinstance(s, StartTransaction)]

    def rendezvous_names(self) -> set[str]:
        return {s.name for s in self.steps if isinstance(s, Rendezvous)}

    def records_per_iteration(self) -> int:
        """Transaction records one iteration emits, implicit per-request ones included."""
        count = 0
        depth = 0
        for step in self.steps:
            if isinstance(step, StartTransaction):
                count += 1
                depth += 1
            elif isinstance(step, EndTransaction):
                depth -= 1
            elif isinstance(step, Request) and depth == 0:
                count += 1
        return count


# ---------------------------------------------------------------------------
# parsing


def _fail(msg: str) -> InvalidDocument:
    return InvalidDocument(msg)


def _load_table_csv(path: Path) -> tuple[tuple[str, ...], tuple[tuple[str, ...], ...]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise _fail(f"cannot read parameter file {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r]
    if not rows:
        raise _fail(f"parameter file {path} has no header row")
    columns = tuple(c.strip() for c in rows[0])
    body = tuple(tuple(r) for r in rows[1:])
    for i, r in enumerate(body, start=2):
        if len(r) != len(columns):
            raise _fail(f"{path}:{i}: expected {len(columns)} fields, got {len(r)}")
    return columns, body


def _parse_table(name: str, raw: Any, base_dir: Path | None) -> ParameterTable:
    if not isinstance(raw, Mapping):
        raise _fail(f"parameter table {name!r} must be an object")
    policy = raw.get("policy", "sequential")
    if policy not in POLICIES:
        raise _fail(f"parameter table {name!r}: unknown policy {policy!r}")
    if "file" in raw:
        path = Path(raw["file"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        columns, rows = _load_table_csv(path)
        source = str(raw["file"])
    elif "columns" in raw:
        columns = tuple(str(c) for c in raw["columns"])
        raw_rows = raw.get("rows", [])
        if not isinstance(raw_rows, list):
            raise _fail(f"parameter table {name!r}: rows must be a list")
        rows = tuple(tuple(str(v) for v in r) for r in raw_rows)
        if any(len(r) != len(columns) for r in rows):
            raise _fail(f"parameter table {name!r}: row width differs from columns")
        source = None
    else:
        raise _fail(f"parameter table {name!r} needs 'file' or 'columns'")
    if not columns or len(set(columns)) != len(columns):
        raise _fail(f"parameter table {name!r}: column names must be unique and non-empty")
    return ParameterTable(name, policy, columns, rows, source)


def _parse_request(raw: Any, index: int) -> Request:
    if not isinstance(raw, Mapping):
        raise _fail(f"step {index}: request must be an object")
    method = str(raw.get("method", "GET")).upper()
    if method not in METHODS:
        raise _fail(f"step {index}: unsupported method {method!r}")
    url = raw.get("url")
    if not isinstance(url, str) or not url:
        raise _fail(f"step {index}: request url must be a non-empty string")
    headers = raw.get("headers", {}) or {}
    if not isinstance(headers, Mapping) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in headers.items()
    ):
        raise _fail(f"step {index}: headers must map strings to strings")
    body = raw.get("body")
    if body is not None and not isinstance(body, str):
        raise _fail(f"step {index}: body must be a string")
    statuses = raw.get("assert_status")
    if statuses is not None:
        if isinstance(statuses, int):
            statuses = [statuses]
        if not isinstance(statuses, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in statuses
        ):
            raise _fail(f"step {index}: assert_status must be a list of integers")
        statuses = frozenset(statuses)
    return Request(method, url, dict(headers), body, statuses, bool(raw.get("literal", False)))


def _parse_think(raw: Any, index: int) -> Think:
    def num(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise _fail(f"step {index}: think_ms must be a number or [lo, hi]")
        return v

    if isinstance(raw, list):
        if len(raw) != 2:
            raise _fail(f"step {index}: think_ms range needs exactly two bounds")
        lo, hi = num(raw[0]), num(raw[1])
    else:
        lo = hi = num(raw)
    if lo < 0 or hi < lo:
        raise _fail(f"step {index}: think_ms needs 0 <= lo <= hi, got [{lo}, {hi}]")
    return Think(lo, hi)


def _parse_step(raw: Any, index: int) -> Step:
    if not isinstance(raw, Mapping) or len(raw) != 1:
        raise _fail(f"step {index}: each step must be an object with exactly one key")
    (kind, value), = raw.items()
    if kind == "request":
        return _parse_request(value, index)
    if kind == "think_ms":
        return _parse_think(value, index)
    if kind in ("start_tx", "end_tx", "rendezvous"):
        if not isinstance(value, str) or not value:
            raise _fail(f"step {index}: {kind} needs a non-empty name")
        return {"start_tx": StartTransaction, "end_tx": EndTransaction, "rendezvous": Rendezvous}[kind](value)
    raise _fail(f"step {index}: unknown step kind {kind!r}")


def check_transactions(steps: tuple[Step, ...]) -> None:
    open_tx: dict[str, int] = {}
    for i, step in enumerate(steps):
        if isinstance(step, StartTransaction):
            if step.name in open_tx:
                raise UnbalancedTransaction(step.name, i, "already open")
            open_tx[step.name] = i
        elif isinstance(step, EndTransaction):
            if step.name not in open_tx:
                raise UnbalancedTransaction(step.name, i, "end without start")
            del open_tx[step.name]
    if open_tx:
        name, i = next(iter(open_tx.items()))
        raise UnbalancedTransaction(name, i, "still open at end of script")


def _column_index(tables: Mapping[str, ParameterTable]) -> dict[str, tuple[str, int] | None]:
    """Map every placeholder spelling to (table, column index); None marks ambiguity."""
    index: dict[str, tuple[str, int] | None] = {}
    for table in tables.values():
        for ci, col in enumerate(table.columns):
            index[f"{table.name}.{col}"] = (table.name, ci)
            index[col] = None if col in index else (table.name, ci)
    return index


def referenced_tables(script: Script) -> set[str]:
    index = _column_index(script.parameters)
    out = set()
    for step in script.steps:
        if isinstance(step, Request):
            for text in step.templates():
                for name in PLACEHOLDER.findall(text):
                    hit = index.get(name)
                    if hit:
                        out.add(hit[0])
    return out


def _check_placeholders(steps: tuple[Step, ...], tables: Mapping[str, ParameterTable]) -> None:
    index = _column_index(tables)
    for i, step in enumerate(steps):
        if not isinstance(step, Request):
            continue
        for text in step.templates():
            for name in PLACEHOLDER.findall(text):
                if name not in index:
                    raise UnboundParameter(name)
                if index[name] is None:
                    raise _fail(f"step {i}: placeholder {{{{{name}}}}} is ambiguous; qualify it as table.column")


def parse_script(document: str | bytes | Mapping[str, Any], base_dir: str | Path | None = None) -> Script:
    """Parse and validate a script document.

    ``base_dir`` resolves relative parameter-file paths.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except ValueError as exc:
            raise _fail(f"script is not valid JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise _fail("script document must be a JSON object")
    name = document.get("name")
    if not isinstance(name, str) or not _IDENTIFIER.match(name):
        raise _fail(f"script name must be an identifier, got {name!r}")
    raw_steps = document.get("steps")
    if not isinstance(raw_steps, list):
        raise _fail("script 'steps' must be a list")
    raw_params = document.get("parameters", {}) or {}
    if not isinstance(raw_params, Mapping):
        raise _fail("script 'parameters' must be an object")
    base = Path(base_dir) if base_dir is not None else None
    tables = {str(k): _parse_table(str(k), v, base) for k, v in raw_params.items()}
    steps = tuple(_parse_step(s, i) for i, s in enumerate(raw_steps))
    check_transactions(steps)
    _check_placeholders(steps, tables)
    return Script(name, steps, tables)


def load_script(path: str | Path) -> Script:
    path = Path(path)
    return parse_script(path.read_text(encoding="utf-8"), base_dir=path.parent)


def _step_to_json(step: Step) -> dict[str, Any]:
    if isinstance(step, Request):
        out: dict[str, Any] = {"method": step.method, "url": step.url}
        if step.headers:
            out["headers"] = dict(step.headers)
        if step.body is not None:
            out["body"] = step.body
        if step.assert_status is not None:
            out["assert_status"] = sorted(step.assert_status)
        if step.literal:
            out["literal"] = True
        return {"request": out}
    if isinstance(step, StartTransaction):
        return {"start_tx": step.name}
    if isinstance(step, EndTransaction):
        return {"end_tx": step.name}
    if isinstance(step, Rendezvous):
        return {"rendezvous": step.name}
    return {"think_ms": step.lo_ms if step.fixed else [step.lo_ms, step.hi_ms]}


def serialize_script(script: Script) -> dict[str, Any]:
    """JSON-ready document with parameter tables inlined."""
    return {
        "name": script.name,
        "parameters": {
            t.name: {"policy": t.policy, "columns": list(t.columns), "rows": [list(r) for r in t.rows]}
            for t in script.parameters.values()
        },
        "steps": [_step_to_json(s) for s in script.steps],
    }


def dumps_script(script: Script) -> str:
    return json.dumps(serialize_script(script), indent=2) + "\n"


# ---------------------------------------------------------------------------
# binding


def binding_rng(seed: int, vuser_index: int, iteration: int) -> random.Random:
    # per-vuser generator keyed by seed xor vuser id; iteration makes each pass pure
    return random.Random(f"{seed ^ vuser_index}:{iteration}")


def bind_parameters(script: Script, vuser_index: int, iteration: int, seed: int = 0) -> tuple[Step, ...]:
    """Resolve every placeholder and think range for one iteration of one vuser."""
    if vuser_index < 0 or iteration < 0:
        raise ValueError("vuser_index and iteration must be >= 0")
    rng = binding_rng(seed, vuser_index, iteration)
    needed = referenced_tables(script)
    rows: dict[str, tuple[str, ...]] = {}
    for table in script.parameters.values():
        if table.name in needed:
            rows[table.name] = table.row_for(vuser_index, iteration, rng)
    index = _column_index(script.parameters)

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        hit = index.get(name)
        if not hit:
            raise UnboundParameter(name)
        table, col = hit
        return rows[table][col]

    resolved: list[Step] = []
    for step in script.steps:
        if isinstance(step, Request) and not step.literal:
            body = PLACEHOLDER.sub(substitute, step.body) if step.body is not None else None
            resolved.append(
                Request(
                    step.method,
                    PLACEHOLDER.sub(substitute, step.url),
                    {k: PLACEHOLDER.sub(substitute, v) for k, v in step.headers.items()},
                    body,
                    step.assert_status,
                    literal=True,
                )
            )
        elif isinstance(step, Think) and not step.fixed:
            ms = rng.uniform(step.lo_ms, step.hi_ms)
            resolved.append(Think(ms, ms))
        else:
            resolved.append(step)
    return tuple(resolved)

