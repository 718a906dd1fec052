import json
import signal
import socket
import subprocess
import sys
import time

import aiohttp
import pytest

from conftest import run, tx_script
from lodestar.cli import main
from lodestar.scripting import load_script
from lodestar.testbed import TestbedThread


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def scenario_file(tmp_path, target, **schedule):
    doc = {"name": "cli", "target": target, "seed": 5,
           "groups": [{"name": "g", "script": tx_script("browse"), "vusers": 2}],
           "schedule": schedule or {"iterations": 3}, "monitor": None}
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    return path


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for sub in ("record", "run", "report", "agent", "testbed"):
        assert sub in out


def test_run_then_report(tmp_path, capsys):
    with TestbedThread(latency_ms=2) as tb:
        path = scenario_file(tmp_path, tb.url)
        assert main(["run", str(path), "--out", str(tmp_path / "r1")]) == 0
    r1 = tmp_path / "r1"
    for name in ("report.html", "transactions.csv", "records.csv", "counters.csv", "meta.json", "scenario.json"):
        assert (r1 / name).exists()
    meta = json.loads((r1 / "meta.json").read_text())
    assert meta["status"] == "complete" and meta["partial"] is False and meta["seed"] == 5
    assert (r1 / "scenario.json").read_text() == path.read_text()
    assert "6 PASS, 0 FAIL" in capsys.readouterr().out

    assert main(["report", str(r1), "--out", str(r1)]) == 0
    first = (r1 / "transactions.csv").read_bytes()
    assert main(["report", str(r1), "--out", str(r1)]) == 0
    assert (r1 / "transactions.csv").read_bytes() == first
    assert main(["report", str(r1), "--out", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "transactions.csv").read_bytes() == first


def test_missing_scenario_exits_1(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_invalid_scenario_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "x"')
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "bad.json" in capsys.readouterr().err


def test_bad_agent_address_exits_1(tmp_path):
    path = scenario_file(tmp_path, "mock://")
    assert main(["run", str(path), "--agents", "nonsense", "--out", str(tmp_path / "o")]) == 1


def test_unreachable_agent_exits_2(tmp_path, capsys):
    path = scenario_file(tmp_path, "mock://")
    assert main(["run", str(path), "--agents", f"127.0.0.1:{free_port()}", "--out", str(tmp_path / "o")]) == 2
    assert "127.0.0.1" in capsys.readouterr().err


def test_seed_override_from_environment(tmp_path, monkeypatch):
    path = scenario_file(tmp_path, "mock://")
    monkeypatch.setenv("LODESTAR_SEED", "99")
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "meta.json").read_text())["seed"] == 99


def test_mock_runs_give_identical_transactions_csv(tmp_path):
    path = scenario_file(tmp_path, "mock://", iterations=4)
    assert main(["run", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(path), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "transactions.csv").read_bytes() == (tmp_path / "b" / "transactions.csv").read_bytes()


def _wait_for_line(proc, timeout=10):
    deadline = time.monotonic() + timeout
    line = proc.stdout.readline()
    assert line and time.monotonic() < deadline, "subprocess printed nothing"
    return line


def test_testbed_and_record_subcommands(tmp_path):
    tb_port, rec_port = free_port(), free_port()
    out = tmp_path / "rec.script"
    testbed = subprocess.Popen([sys.executable, "-m", "lodestar", "testbed", "--port", str(tb_port),
                                "--latency-ms", "1", "--slots", "2"], stdout=subprocess.PIPE, text=True)
    recorder = subprocess.Popen([sys.executable, "-m", "lodestar", "record", "--port", str(rec_port),
                                 "--out", str(out), "--name", "cli_rec"], stdout=subprocess.PIPE, text=True)
    try:
        _wait_for_line(testbed)
        _wait_for_line(recorder)

        async def traffic():
            async with aiohttp.ClientSession() as s:
                for path in ("/browse", "/search?q=z"):
                    async with s.get(f"http://127.0.0.1:{tb_port}{path}", proxy=f"http://127.0.0.1:{rec_port}") as r:
                        assert r.status == 200

        run(traffic())
        recorder.send_signal(signal.SIGINT)
        assert recorder.wait(10) == 0
        testbed.send_signal(signal.SIGTERM)
        assert testbed.wait(10) == 0
    finally:
        for p in (testbed, recorder):
            if p.poll() is None:
                p.kill()
                p.wait()
    script = load_script(out)
    assert script.name == "cli_rec"
    assert [s.url for s in script.steps] == ["/browse", "/search?q=z"]


def test_agent_subcommand_serves_a_run(tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "lodestar", "agent", "--listen", "0", "--capacity", "5",
                             "--host", "127.0.0.1"], stdout=subprocess.PIPE, text=True)
    try:
        address = _wait_for_line(proc).split()[3]
        path = scenario_file(tmp_path, "mock://")
        assert main(["run", str(path), "--agents", address, "--out", str(tmp_path / "o")]) == 0
        meta = json.loads((tmp_path / "o" / "meta.json").read_text())
        assert [a["address"] for a in meta["agents"]] == [address]
        assert meta["pass"] == 6
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
