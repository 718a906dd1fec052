import asyncio
import json
from pathlib import Path

import pytest

from lodestar.scenario import scenario_from_dict
from lodestar.testbed import TestbedConfig, TestbedThread

SAMPLES = Path(__file__).resolve().parent.parent / "src" / "lodestar" / "samples"


def run(coro, timeout=120):
    return asyncio.run(asyncio.wait_for(coro, timeout))


def tx_script(name="t", url="/browse", **request):
    return {"name": name, "steps": [
        {"start_tx": name},
        {"request": {"method": "GET", "url": url, **request}},
        {"end_tx": name},
    ]}


def make_scenario(target, groups, schedule, **extra):
    doc = {"name": extra.pop("name", "test"), "target": target, "seed": extra.pop("seed", 1),
           "groups": groups, "schedule": schedule, "monitor": extra.pop("monitor", None), **extra}
    return scenario_from_dict(doc)


@pytest.fixture
def testbed():
    with TestbedThread(TestbedConfig(port=0, latency_ms=5, service_slots=50)) as tb:
        yield tb


@pytest.fixture
def write_json(tmp_path):
    def write(name, doc):
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path
    return write
