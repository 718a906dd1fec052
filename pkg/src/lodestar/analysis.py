"""Statistics over transaction records and the report files built from them."""

from __future__ import annotations

import csv
import html
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import NoData
from .monitor import CounterSample
from .runtime import FAIL, TransactionRecord

TRANSACTIONS_HEADER = (
    "transaction,level,count,pass,fail,min_ms,avg_ms,p50_ms,p90_ms,p95_ms,max_ms,throughput_per_s,error_rate"
)
COUNTERS_HEADER = "host,counter,timestamp_ms,value"
RECORDS_HEADER = "run_id,group,vuser_id,transaction,start_ns,end_ns,wall_start_ms,status,connect_ms"
BUCKET_MS = 1000
_NS_PER_MS = 1_000_000


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: element ceil(q*N) (1-based) of the sorted values; q=0 gives the minimum."""
    if not values:
        raise NoData("percentile of an empty list")
    if not 0 <= q <= 1:
        raise ValueError(f"q must be in [0, 1], got {q}")
    ordered = sorted(values)
    # decimal reading of q so that 0.9 * 100 is exactly 90
    rank = math.ceil(Fraction(str(q)) * len(ordered))
    return ordered[max(rank, 1) - 1]


@dataclass(frozen=True)
class TransactionStats:
    transaction: str
    count: int
    pass_count: int
    fail_count: int
    min_ms: float | None
    avg_ms: float | None
    max_ms: float | None
    p50_ms: float | None
    p90_ms: float | None
    p95_ms: float | None
    throughput_per_s: float
    error_rate: float
    level: int | None = None


def _stats(name: str, durations: list[float], fails: int, completed: int, window_ms: float,
           level: int | None = None) -> TransactionStats:
    throughput = completed / (window_ms / 1000.0)
    if not durations:
        return TransactionStats(name, 0, 0, 0, None, None, None, None, None, None, throughput, 0.0, level)
    n = len(durations)
    ordered = sorted(durations)
    avg = math.fsum(ordered) / n
    # fsum keeps avg inside [min, max] despite rounding
    avg = min(max(avg, ordered[0]), ordered[-1])
    return TransactionStats(
        name, n, n - fails, fails,
        ordered[0], avg, ordered[-1],
        percentile(ordered, 0.5), percentile(ordered, 0.9), percentile(ordered, 0.95),
        throughput, fails / n, level,
    )


def aggregate(records: Iterable[TransactionRecord], window: tuple[float, float],
              transaction: str | None = None, level: int | None = None) -> dict[str, TransactionStats]:
    """Per-transaction stats for records that *start* inside ``window`` (wall ms, inclusive).

    Throughput counts records that *complete* inside the window. FAIL records
    are part of the latency figures and show up again in the error rate.
    """
    t0, t1 = window
    if not t1 > t0:
        raise ValueError("window needs t1 > t0")
    lo_ns, hi_ns = t0 * _NS_PER_MS, t1 * _NS_PER_MS
    durations: dict[str, list[float]] = defaultdict(list)
    fails: dict[str, int] = defaultdict(int)
    completed: dict[str, int] = defaultdict(int)
    for r in records:
        if t0 <= r.wall_start_ms <= t1:
            durations[r.transaction].append(r.duration_ms)
            if r.status == FAIL:
                fails[r.transaction] += 1
        if lo_ns <= r.wall_end_ns <= hi_ns:
            completed[r.transaction] += 1
    out = {
        name: _stats(name, durations[name], fails[name], completed[name], t1 - t0, level)
        for name in sorted(durations)
    }
    if transaction is not None:
        if transaction not in out:
            raise NoData(f"no records for transaction {transaction!r} in window")
        return {transaction: out[transaction]}
    return out


def overall_window(records: Sequence[TransactionRecord], t0_ms: int) -> tuple[int, int]:
    """[run start, last completion] in whole ms; never empty."""
    if not records:
        return t0_ms, t0_ms + 1
    lo = min(t0_ms, min(r.wall_start_ms for r in records))
    hi = -(-max(r.wall_end_ns for r in records) // _NS_PER_MS)
    return lo, max(hi, lo + 1)


def step_load_stats(records: Sequence[TransactionRecord], t0_ms: int, levels: Sequence[int],
                    hold_ms: float, warmup_ms: float) -> list[TransactionStats]:
    """One row per (level, transaction), levels ascending, warm-up discarded."""
    names = sorted({r.transaction for r in records})
    rows = []
    for i, level in enumerate(levels):
        lo = t0_ms + i * hold_ms + warmup_ms
        hi = t0_ms + (i + 1) * hold_ms
        # half-open: a start exactly at the switch belongs to the next level
        stats = aggregate([r for r in records if r.wall_start_ms < hi], (lo, hi), level=level)
        for name in names:
            rows.append(stats.get(name) or _stats(name, [], 0, 0, hi - lo, level))
    return rows


def latency_series(records: Sequence[TransactionRecord], t0_ms: int, n_buckets: int,
                   bucket_ms: int = BUCKET_MS) -> list[dict[str, Any]]:
    sums = [0.0] * n_buckets
    counts = [0] * n_buckets
    errors = [0] * n_buckets
    for r in records:
        b = (r.wall_start_ms - t0_ms) // bucket_ms
        if 0 <= b < n_buckets:
            sums[b] += r.duration_ms
            counts[b] += 1
            errors[b] += r.status == FAIL
    return [
        {"bucket": i, "count": counts[i], "errors": errors[i],
         "avg_ms": sums[i] / counts[i] if counts[i] else None}
        for i in range(n_buckets)
    ]


def correlate_counters(t0_ms: float, n_buckets: int, samples: Iterable[CounterSample],
                       bucket_ms: int = BUCKET_MS) -> dict[tuple[str, str], list[float | None]]:
    """Resample each (host, counter) series onto the report buckets.

    A bucket takes the last value sampled before the bucket's end; buckets
    before a series' first sample stay None.
    """
    series: dict[tuple[str, str], list[CounterSample]] = defaultdict(list)
    for s in samples:
        series[(s.host, s.counter)].append(s)
    out = {}
    for key in sorted(series):
        ordered = sorted(series[key], key=lambda s: (s.timestamp_ms, s.value))
        values: list[float | None] = []
        j = -1
        for b in range(n_buckets):
            end = t0_ms + (b + 1) * bucket_ms
            while j + 1 < len(ordered) and ordered[j + 1].timestamp_ms < end:
                j += 1
            values.append(ordered[j].value if j >= 0 else None)
        out[key] = values
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    meta: dict[str, Any]
    overall: list[TransactionStats]
    levels: list[TransactionStats]
    series: list[dict[str, Any]]
    overlay: dict[tuple[str, str], list[float | None]]
    records: list[TransactionRecord] = field(default_factory=list, repr=False)
    counters: list[CounterSample] = field(default_factory=list, repr=False)


def build_report(records: Sequence[TransactionRecord], counters: Sequence[CounterSample],
                 meta: dict[str, Any]) -> RunReport:
    t0 = int(meta.get("t0_ms") or (min((r.wall_start_ms for r in records), default=0)))
    lo, hi = overall_window(records, t0)
    overall = list(aggregate(records, (lo, hi)).values())
    levels: list[TransactionStats] = []
    sl = meta.get("step_load")
    if sl:
        levels = step_load_stats(records, t0, sl["levels"], sl["hold_ms"], sl["warmup_ms"])
    n_buckets = max(1, math.ceil((hi - t0) / BUCKET_MS))
    return RunReport(
        meta=dict(meta),
        overall=overall,
        levels=levels,
        series=latency_series(records, t0, n_buckets),
        overlay=correlate_counters(t0, n_buckets, counters),
        records=list(records),
        counters=list(counters),
    )


def _ms(v: float | None) -> str:
    return "" if v is None else f"{v:.3f}"


def transaction_rows(report: RunReport) -> list[list[str]]:
    rows = []
    for s in [*report.overall, *report.levels]:
        rows.append([
            s.transaction, "" if s.level is None else str(s.level),
            str(s.count), str(s.pass_count), str(s.fail_count),
            _ms(s.min_ms), _ms(s.avg_ms), _ms(s.p50_ms), _ms(s.p90_ms), _ms(s.p95_ms), _ms(s.max_ms),
            f"{s.throughput_per_s:.3f}", f"{s.error_rate:.4f}",
        ])
    return rows


def _write_csv(path: Path, header: str, rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def record_sort_key(r: TransactionRecord):
    return (r.wall_start_ms, r.vuser_id, r.start_ns, r.transaction, r.end_ns)


def write_records_csv(path: Path, records: Iterable[TransactionRecord], header: bool = True) -> None:
    rows = (
        [r.run_id, r.group, r.vuser_id, r.transaction, r.start_ns, r.end_ns, r.wall_start_ms, r.status,
         repr(r.connect_ms)]
        for r in sorted(records, key=record_sort_key)
    )
    _write_csv(path, RECORDS_HEADER, rows)


def emit_report(report: RunReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "transactions.csv", out / "counters.csv", out / "records.csv", out / "report.html"]
    _write_csv(paths[0], TRANSACTIONS_HEADER, transaction_rows(report))
    _write_csv(
        paths[1], COUNTERS_HEADER,
        ([c.host, c.counter, c.timestamp_ms, repr(c.value)]
         for c in sorted(report.counters, key=lambda c: (c.host, c.counter, c.timestamp_ms, c.value))),
    )
    write_records_csv(paths[2], report.records)
    paths[3].write_text(render_html(report), encoding="utf-8")
    return paths


def read_records_csv(path: str | Path) -> list[TransactionRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [TransactionRecord.from_dict(row) for row in csv.DictReader(fh)]


def read_counters_csv(path: str | Path) -> list[CounterSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CounterSample.from_dict(row) for row in csv.DictReader(fh)]


def load_run_dir(run_dir: str | Path) -> RunReport:
    """Rebuild the report of a finished run from its raw files."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "meta.json").read_text(encoding="utf-8"))
    records = read_records_csv(run_dir / "records.csv")
    counters_path = run_dir / "counters.csv"
    counters = read_counters_csv(counters_path) if counters_path.exists() else []
    return build_report(records, counters, meta)


# ---------------------------------------------------------------------------
# html

_CSS = """
body{font-family:system-ui,sans-serif;margin:2em;color:#222}
table{border-collapse:collapse;margin:1em 0}
th,td{border:1px solid #ccc;padding:4px 8px;text-align:right}
th:first-child,td:first-child{text-align:left}
th{background:#f3f3f3}
.fail{color:#b00}
svg{background:#fafafa;border:1px solid #ddd}
"""


def _svg_line(values: Sequence[float | None], label: str, width: int = 720, height: int = 160) -> str:
    pts = [(i, v) for i, v in enumerate(values) if v is not None]
    if not pts:
        return f"<p>{html.escape(label)}: no data</p>"
    vmax = max(v for _, v in pts) or 1.0
    n = max(len(values) - 1, 1)
    coords = " ".join(
        f"{10 + (width - 20) * i / n:.1f},{height - 10 - (height - 30) * v / vmax:.1f}" for i, v in pts
    )
    return (
        f'<svg width="{width}" height="{height}" role="img" aria-label="{html.escape(label)}">'
        f'<text x="10" y="14" font-size="12">{html.escape(label)} (max {vmax:.3g})</text>'
        f'<polyline fill="none" stroke="#2a6fdb" stroke-width="1.5" points="{coords}"/></svg>'
    )


def _stats_table(rows: list[list[str]], with_level: bool) -> str:
    head = TRANSACTIONS_HEADER.split(",")
    if not with_level:
        head = [h for h in head if h != "level"]
    out = ["<table><tr>" + "".join(f"<th>{h}</th>" for h in head) + "</tr>"]
    for row in rows:
        cells = row if with_level else [row[0], *row[2:]]
        cls = ' class="fail"' if row[4] not in ("0", "") else ""
        out.append(f"<tr{cls}>" + "".join(f"<td>{html.escape(c)}</td>" for c in cells) + "</tr>")
    out.append("</table>")
    return "\n".join(out)


def render_html(report: RunReport) -> str:
    meta = report.meta
    rows = transaction_rows(report)
    n_overall = len(report.overall)
    parts = [
        "<!DOCTYPE html><html><head><meta charset='utf-8'>",
        f"<title>lodestar report: {html.escape(str(meta.get('scenario', '')))}</title>",
        f"<style>{_CSS}</style></head><body>",
        f"<h1>{html.escape(str(meta.get('scenario', 'run')))}</h1>",
        "<p>run <code>{}</code>, seed {}, mode {}{}</p>".format(
            html.escape(str(meta.get("run_id", ""))), html.escape(str(meta.get("seed", ""))),
            html.escape(str(meta.get("mode", ""))),
            " &mdash; <strong class='fail'>PARTIAL RESULTS</strong>" if meta.get("partial") else "",
        ),
        "<h2>Transactions</h2>",
        _stats_table(rows[:n_overall], with_level=False),
    ]
    if report.levels:
        parts += ["<h2>Step load</h2>", _stats_table(rows[n_overall:], with_level=True)]
    parts += [
        "<h2>Latency over time (1s buckets)</h2>",
        _svg_line([b["avg_ms"] for b in report.series], "avg response time ms"),
        _svg_line([float(b["count"]) for b in report.series], "transactions started per second"),
    ]
    if report.overlay:
        parts.append("<h2>Counters</h2>")
        for (host, counter), values in report.overlay.items():
            parts.append(_svg_line(values, f"{host} {counter}"))
    omitted = meta.get("counter_omissions") or []
    if omitted:
        parts.append("<p>Counters unavailable: " + html.escape(", ".join(omitted)) + "</p>")
    parts.append("</body></html>\n")
    return "\n".join(parts)
