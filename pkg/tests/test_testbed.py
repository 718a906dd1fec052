import asyncio
import time

import aiohttp
import pytest

from conftest import run
from oracles import closed_loop_fifo_des
from lodestar.errors import BindError, ValidationError
from lodestar.testbed import SlotGate, Testbed, TestbedConfig, TestbedThread


def timed_get(url, n=1, method="GET", data=None):
    async def main():
        async with aiohttp.ClientSession() as session:
            async def one():
                t = time.monotonic()
                async with session.request(method, url, data=data) as resp:
                    await resp.read()
                    return resp.status, (time.monotonic() - t) * 1000

            return await asyncio.gather(*(one() for _ in range(n)))

    return run(main())


def test_idle_latency():
    with TestbedThread(latency_ms=50, service_slots=10) as tb:
        timed_get(tb.url + "/browse")  # warm the connection path
        (status, ms), = timed_get(tb.url + "/browse")
    assert status == 200
    assert 50 <= ms <= 70


def test_single_slot_serializes_requests():
    with TestbedThread(latency_ms=50, service_slots=1) as tb:
        results = timed_get(tb.url + "/browse", n=2)
        log = tb.entries()
    assert max(ms for _, ms in results) >= 100
    assert sorted(round(e.queue_wait_ms) >= 45 for e in log) == [False, True]


def test_routes_and_statuses():
    with TestbedThread(latency_ms=1) as tb:
        assert timed_get(tb.url + "/search?q=radio")[0][0] == 200
        assert timed_get(tb.url + "/shop", method="POST", data=b"")[0][0] == 400
        assert timed_get(tb.url + "/shop", method="POST", data=b'{"sku":1}')[0][0] == 200
        assert timed_get(tb.url + "/nowhere")[0][0] == 404
        assert timed_get(tb.url + "/shop")[0][0] == 405
        paths = [e.path for e in tb.entries()]
    assert paths == ["/search?q=radio", "/shop", "/shop", "/nowhere", "/shop"]


def test_log_and_reset_endpoints():
    with TestbedThread(latency_ms=1) as tb:
        timed_get(tb.url + "/browse")

        async def main():
            async with aiohttp.ClientSession() as s:
                async with s.get(tb.url + "/_log") as r:
                    log = await r.json()
                async with s.get(tb.url + "/_reset") as r:
                    await r.read()
                async with s.get(tb.url + "/_log") as r:
                    return log, await r.json()

        before, after = run(main())
    assert [e["path"] for e in before] == ["/browse"]
    assert set(before[0]) >= {"path", "wall_ms", "queue_wait_ms"}
    assert after == []


def test_seeded_error_injection_is_reproducible():
    def statuses():
        with TestbedThread(latency_ms=0, error_rate=0.3, seed=11) as tb:
            return [timed_get(tb.url + "/browse")[0][0] for _ in range(40)]

    first = statuses()
    assert first == statuses()
    assert 500 in first and 200 in first


def test_no_drops_under_1000_concurrent_connections():
    with TestbedThread(latency_ms=20, service_slots=50) as tb:
        async def main():
            conn = aiohttp.TCPConnector(limit=0)
            async with aiohttp.ClientSession(connector=conn, timeout=aiohttp.ClientTimeout(total=60)) as s:
                async def one():
                    async with s.get(tb.url + "/browse") as r:
                        await r.read()
                        return r.status
                return await asyncio.gather(*(one() for _ in range(1000)))

        statuses = run(main())
        sent = tb.call(lambda: tb.testbed.responses_sent)
        log = tb.entries()
        peak = tb.call(lambda: tb.testbed.gate.peak_busy)
    assert statuses == [200] * 1000
    assert len(log) == sent == 1000
    assert peak <= 50


def test_gate_is_fifo_and_bounded():
    async def main():
        gate = SlotGate(2)
        order = []

        async def worker(i):
            await gate.acquire()
            order.append(i)
            await asyncio.sleep(0.01)
            gate.release()

        tasks = []
        for i in range(8):
            tasks.append(asyncio.create_task(worker(i)))
            await asyncio.sleep(0)
        await asyncio.gather(*tasks)
        return order, gate

    order, gate = run(main())
    assert order == list(range(8))
    assert gate.peak_busy == 2 and gate.busy == 0 and gate.free == 2


def test_closed_loop_response_matches_fifo_simulation():
    """Closed-loop clients against the 5-slot testbed vs a discrete-event model."""
    clients, slots, service = 15, 5, 40
    with TestbedThread(latency_ms=service, service_slots=slots) as tb:
        async def main():
            async with aiohttp.ClientSession(connector=aiohttp.TCPConnector(limit=0)) as s:
                samples = []
                end = time.monotonic() + 3.0

                async def client():
                    while time.monotonic() < end:
                        t = time.monotonic()
                        async with s.get(tb.url + "/browse") as r:
                            await r.read()
                        samples.append((t, (time.monotonic() - t) * 1000))

                await asyncio.gather(*(client() for _ in range(clients)))
                return samples

        samples = run(main())
    start = min(t for t, _ in samples)
    measured = [ms for t, ms in samples if t - start >= 1.0]
    mean = sum(measured) / len(measured)
    model, _ = closed_loop_fifo_des(clients, slots, service, 60_000, warmup_ms=1000)
    assert model == pytest.approx(clients / slots * service)
    assert abs(mean - model) / model <= 0.25


def test_bind_error():
    async def main():
        first = await Testbed(TestbedConfig(port=0)).start()
        try:
            with pytest.raises(BindError):
                await Testbed(TestbedConfig(port=first.port)).start()
        finally:
            await first.stop()

    run(main())


@pytest.mark.parametrize("kwargs", [{"service_slots": 0}, {"error_rate": 1.5}, {"latency_ms": -1},
                                    {"latency_ms": {"/browse": -5}}])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TestbedConfig(**kwargs)


def test_per_endpoint_latency():
    config = TestbedConfig(latency_ms={"/browse": 5, "*": 60})
    assert config.latency_for("/browse") == 5 and config.latency_for("/shop") == 60
