"""Acceptance suite: the eight desk-scale criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible even under
output capture). Run standalone with ``python3 tests/test_acceptance.py``.
"""

import asyncio
import csv
import random
import statistics
import sys
import time
from contextlib import contextmanager

import pytest

from conftest import make_scenario, run
from oracles import closed_loop_fifo_des, nearest_rank
from lodestar.agent import Agent
from lodestar.analysis import COUNTERS_HEADER, build_report, emit_report, percentile
from lodestar.controller import Run, run_scenario, run_step_load, start_run
from lodestar.monitor import AVAILABLE_MBYTES, CPU_PERCENT
from lodestar.runtime import MockTransport, RealClock, VuserContext, run_vuser_loop
from lodestar.scripting import dumps_script, parse_script
from lodestar.testbed import TestbedConfig, TestbedThread


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def check(number, title):
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            with capsys.disabled():
                print(f"\n[FAIL] criterion {number}: {title}: {type(exc).__name__}: {str(exc).splitlines()[0][:160]}")
            raise
        else:
            summary = ", ".join(f"{k}={v}" for k, v in detail.items())
            with capsys.disabled():
                print(f"\n[PASS] criterion {number}: {title} ({summary})")
    return check


def test_1_step_load_degradation(criterion):
    with criterion(1, "step-load degradation") as d:
        with TestbedThread(TestbedConfig(port=0, latency_ms=50, service_slots=5)) as tb:
            script = {"name": "browse", "steps": [{"start_tx": "browse"},
                                                  {"request": {"method": "GET", "url": "/browse"}},
                                                  {"end_tx": "browse"}]}
            sc = make_scenario(tb.url, [{"name": "g", "script": script, "vusers": 25}],
                               {"step_load": {"levels": [2, 5, 25], "hold_ms": 10_000}})
            started = time.monotonic()
            report = run(run_step_load(sc))
            elapsed = time.monotonic() - started
        r2, r5, r25 = (report.row("browse", n) for n in (2, 5, 25))
        model_rt, model_tput = closed_loop_fifo_des(25, 5, 50, 120_000, warmup_ms=1000)
        d.update(avg2=f"{r2.avg_ms:.1f}ms", avg5=f"{r5.avg_ms:.1f}ms", avg25=f"{r25.avg_ms:.1f}ms",
                 tput25=f"{r25.throughput_per_s:.1f}/s", des25=f"{model_rt:.0f}ms", runtime=f"{elapsed:.1f}s")
        assert [r.level for r in report.rows] == [2, 5, 25]
        assert 50 <= r2.avg_ms <= 80
        assert r25.avg_ms >= 2 * r5.avg_ms
        assert abs(r25.throughput_per_s - 100) <= 15
        assert abs(r25.avg_ms - model_rt) / model_rt <= 0.25
        assert model_tput == pytest.approx(100, rel=0.01)
        assert elapsed <= 60


def test_2_transaction_timing(criterion):
    with criterion(2, "transaction timing accuracy") as d:
        script = {"name": "t", "steps": [{"start_tx": "t"}, {"think_ms": 100}, {"end_tx": "t"}]}
        with TestbedThread(latency_ms=1) as tb:
            sc = make_scenario(tb.url, [{"name": "g", "script": script, "vusers": 1}], {"iterations": 50})
            started = time.monotonic()
            result = run(run_scenario(sc))
            elapsed = time.monotonic() - started
        durations = [r.duration_ms for r in result.records]
        d.update(n=len(durations), median=f"{statistics.median(durations):.2f}ms",
                 min=f"{min(durations):.2f}ms", runtime=f"{elapsed:.1f}s")
        assert len(durations) == 50
        assert 100 <= statistics.median(durations) <= 115
        assert min(durations) >= 100
        assert elapsed <= 10


def test_3_rendezvous_simultaneity(criterion):
    with criterion(3, "rendezvous simultaneity") as d:
        with TestbedThread(latency_ms=5, service_slots=20) as tb:
            script = {"name": "shop", "steps": [
                {"think_ms": [0, 500]}, {"rendezvous": "checkout"},
                {"request": {"method": "POST", "url": "/shop", "body": "{\"sku\": 1}"}},
            ]}
            sc = make_scenario(tb.url, [{"name": "shoppers", "script": script, "vusers": 10}], {"iterations": 1},
                               rendezvous={"checkout": {"quorum": "all"}}, seed=3)

            async def go():
                r: Run = await start_run(sc)
                return r, await r.wait()

            rdv_run, result = run(go())
            hits = [e.wall_ms for e in tb.entries() if e.path == "/shop"]
        arrivals = sorted(t for _, _, t in rdv_run.coordinator.arrivals)
        (release,) = rdv_run.coordinator.releases
        spread = max(hits) - min(hits)
        d.update(arrival_spread=f"{arrivals[-1] - arrivals[0]:.0f}ms", cohort=len(release.cohort),
                 request_window=f"{spread:.1f}ms")
        assert arrivals[-1] - arrivals[0] > 100  # the think range really staggered them
        assert release.cohort == frozenset(range(10)) and release.reason == "quorum"
        assert len(hits) == 10 and spread <= 50

        # timeout: 3 of 10 arrive, the other 7 are still thinking
        fast = {"name": "fast", "steps": [{"rendezvous": "r"}, {"request": {"url": "/browse"}}]}
        slow = {"name": "slow", "steps": [{"think_ms": 1000}, {"rendezvous": "r"}, {"request": {"url": "/browse"}}]}
        with TestbedThread(latency_ms=1) as tb:
            sc = make_scenario(tb.url, [{"name": "fast", "script": fast, "vusers": 3},
                                        {"name": "slow", "script": slow, "vusers": 7}],
                               {"iterations": 1}, rendezvous={"r": {"quorum": "all", "timeout_ms": 100}})

            async def go2():
                r = await start_run(sc)
                await r.wait()
                return r

            to_run = run(go2())
        first = to_run.coordinator.releases[0]
        fast_ids = {v for v in range(10) if to_run.group_of[v] == "fast"}
        third = sorted(t for v, _, t in to_run.coordinator.arrivals if v in fast_ids)[2]
        lag = first.time_ms - third
        d.update(timeout_cohort=len(first.cohort), timeout_lag=f"{lag:.1f}ms")
        assert first.cohort == fast_ids and first.reason == "timeout"
        assert abs(lag - 100) <= 20


def test_4_percentile_oracle(criterion):
    with criterion(4, "percentile oracle") as d:
        rng = random.Random(4)
        checked = 0
        for _ in range(1000):
            values = [rng.randint(-10_000, 10_000) for _ in range(rng.randint(1, 500))]
            for q, pct in ((0, 0), (0.5, 50), (0.9, 90), (0.95, 95), (1, 100)):
                assert percentile(values, q) == nearest_rank(values, pct)
                checked += 1
        d.update(lists=1000, comparisons=checked)


def test_5_distributed_conservation(criterion, monkeypatch):
    with criterion(5, "distributed conservation") as d:
        seen: dict[str, list[int]] = {}
        original = Run._ingest

        def spy(self, link, msg):
            seen.setdefault(link.address, []).append(msg["seq"])
            return original(self, link, msg)

        monkeypatch.setattr(Run, "_ingest", spy)
        script = {"name": "one", "steps": [{"start_tx": "browse"}, {"request": {"url": "/browse"}},
                                           {"end_tx": "browse"}]}
        with TestbedThread(latency_ms=2, service_slots=10) as tb:
            async def go():
                agents = [await Agent(capacity=5).start() for _ in range(2)]
                try:
                    # 5 vusers on each of the two agents
                    sc = make_scenario(tb.url, [{"name": "g", "script": script, "vusers": 10}], {"iterations": 20})
                    return await run_scenario(sc, [a.address for a in agents])
                finally:
                    for a in agents:
                        await a.close()

            result = run(go())
        keys = [(r.vuser_id, r.transaction, r.start_ns) for r in result.records]
        d.update(records=len(result.records), batches={a: len(s) for a, s in seen.items()})
        assert len(result.records) == 200
        assert len(seen) == 2
        for seqs in seen.values():
            assert seqs == list(range(len(seqs)))
        assert len(set(keys)) == len(keys)
        assert sum(a["emitted"] for a in result.meta["agents"]) == 200


def test_6_recorder_round_trip(criterion):
    import aiohttp
    from lodestar.recorder import record_session

    with criterion(6, "recorder round-trip") as d:
        with TestbedThread(latency_ms=1) as tb:
            async def capture():
                stop, ready, holder = asyncio.Event(), asyncio.Event(), {}

                def on_ready(rec):
                    holder["proxy"] = f"http://{rec.host}:{rec.port}"
                    ready.set()

                task = asyncio.create_task(record_session(0, stop, name="session", on_ready=on_ready))
                await ready.wait()
                async with aiohttp.ClientSession() as s:
                    for method, path, body in (("GET", "/browse", None), ("GET", "/search?q=antenna", None),
                                               ("POST", "/shop", b'{"sku": "ant-100"}')):
                        async with s.request(method, tb.url + path, data=body, proxy=holder["proxy"]) as r:
                            await r.read()
                stop.set()
                return await task

            script = run(capture())
            recorded = [e.path for e in tb.entries()]
            tb.reset()
            replay = parse_script(dumps_script(script))
            run(run_vuser_loop(replay, VuserContext(0, "g", tb.url), RealClock(), iterations=1))
            replayed = [e.path for e in tb.entries()]
        d.update(recorded=recorded, replayed=replayed)
        assert len(recorded) == 3
        assert recorded == replayed


def test_7_monitoring_liveness(criterion, tmp_path):
    with criterion(7, "monitoring liveness") as d:
        script = {"name": "t", "steps": [{"start_tx": "t"}, {"request": {"url": "/browse"}}, {"think_ms": 100},
                                         {"end_tx": "t"}]}
        with TestbedThread(latency_ms=1) as tb:
            sc = make_scenario(tb.url, [{"name": "g", "script": script, "vusers": 2}], {"duration_ms": 5000},
                               monitor={"interval_ms": 500, "hosts": ["local"]})
            result = run(run_scenario(sc))
        emit_report(build_report(result.records, result.counters, result.meta), tmp_path)
        with open(tmp_path / "counters.csv", newline="") as fh:
            header = fh.readline().rstrip("\n")
            rows = list(csv.reader(fh))
        ticks = [r for r in rows if r[1] == AVAILABLE_MBYTES]
        d.update(ticks=len(ticks), rows=len(rows), omitted=result.meta["counter_omissions"])
        assert header == COUNTERS_HEADER == "host,counter,timestamp_ms,value"
        assert len(ticks) >= 8
        for host, counter, ts, value in rows:
            int(ts)
            v = float(value)
            if counter == AVAILABLE_MBYTES:
                assert v >= 0
            if counter == CPU_PERCENT:
                assert 0 <= v <= 100
        assert {r[1] for r in rows} >= {AVAILABLE_MBYTES, CPU_PERCENT}


def test_8_determinism(criterion, tmp_path):
    with criterion(8, "determinism") as d:
        script = {"name": "s",
                  "parameters": {"terms": {"policy": "random", "columns": ["term"],
                                           "rows": [[w] for w in ("radio", "antenna", "cable", "router", "modem")]}},
                  "steps": [{"start_tx": "search"}, {"request": {"url": "/search?q={{term}}"}},
                            {"think_ms": [10, 200]}, {"end_tx": "search"},
                            {"start_tx": "shop"}, {"request": {"method": "POST", "url": "/shop", "body": "{{term}}"}},
                            {"end_tx": "shop"}]}

        def once(out):
            MockTransport.reset_journal()
            sc = make_scenario("mock://", [{"name": "g", "script": script, "vusers": 8}], {"iterations": 12}, seed=42)
            result = run(run_scenario(sc))
            emit_report(build_report(result.records, result.counters, result.meta), out)
            return len(result.records), sorted(MockTransport.journal), (out / "transactions.csv").read_bytes()

        a = once(tmp_path / "a")
        b = once(tmp_path / "b")
        d.update(records=a[0], requests=len(a[1]), csv_bytes=len(a[2]))
        assert a[0] == b[0] == 8 * 12 * 2
        assert a[1] == b[1]
        assert a[2] == b[2]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
