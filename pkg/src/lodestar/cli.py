"""``lodestar`` command line: record, run, report, agent, testbed."""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .agent import Agent
from .analysis import build_report, emit_report, load_run_dir
from .controller import Run, run_scenario
from .errors import AgentLost, LodestarError, ValidationError
from .recorder import record_session
from .rundir import RunDirectory
from .scenario import load_scenario
from .scripting import dumps_script
from .testbed import TestbedConfig, serve

log = logging.getLogger("lodestar")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ABORTED = 2


def _stop_on_signals(stop: asyncio.Event) -> None:
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):  # pragma: no cover - non-unix
            pass


async def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    env_seed = os.environ.get("LODESTAR_SEED")
    if env_seed:
        try:
            scenario = replace(scenario, seed=int(env_seed))
        except ValueError:
            raise ValidationError(f"LODESTAR_SEED must be an integer, got {env_seed!r}")
    agents = [a.strip() for a in args.agents.split(",") if a.strip()] if args.agents else None
    out = Path(args.out or f"runs/{scenario.name}-{time.strftime('%Y%m%d-%H%M%S')}")
    rundir = RunDirectory(out)
    rundir.prepare(scenario.source)

    def started(run: Run) -> None:
        rundir.write_meta({**run.metadata(), "status": "running"})
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, run.stop)
            except (NotImplementedError, RuntimeError):  # pragma: no cover
                pass

    code = EXIT_OK
    try:
        result = await run_scenario(scenario, agents, on_records=rundir.append_records, on_start=started)
    except AgentLost as exc:
        print(f"error: {exc}; partial results kept", file=sys.stderr)
        result = exc.result
        code = EXIT_ABORTED
    rundir.write_meta({**result.meta, "status": "partial" if result.partial else "complete"})
    emit_report(build_report(result.records, result.counters, result.meta), out)
    print(f"{scenario.name}: {result.pass_count} PASS, {result.fail_count} FAIL, "
          f"agents {', '.join(a['address'] + '=' + a['state'] for a in result.meta['agents'])}")
    print(f"report: {out / 'report.html'}")
    return code


async def _cmd_agent(args) -> int:
    agent = await Agent(args.host, args.listen, args.capacity, args.tag).start()
    print(f"agent listening on {agent.address} (tag {agent.tag}, capacity {agent.capacity})", flush=True)
    stop = asyncio.Event()
    _stop_on_signals(stop)
    await stop.wait()
    await agent.close()
    return EXIT_OK


async def _cmd_testbed(args) -> int:
    config = TestbedConfig(port=args.port, latency_ms=args.latency_ms, service_slots=args.slots,
                           error_rate=args.error_rate, seed=args.seed, host=args.host)
    stop = asyncio.Event()
    _stop_on_signals(stop)

    def ready(bed) -> None:
        print(f"testbed on http://{args.host}:{bed.port} latency={args.latency_ms}ms slots={args.slots}", flush=True)

    await serve(config, stop, on_ready=ready)
    return EXIT_OK


async def _cmd_record(args) -> int:
    stop = asyncio.Event()
    _stop_on_signals(stop)

    def ready(recorder) -> None:
        print(f"recording proxy on http://{recorder.host}:{recorder.port}; Ctrl-C to finish", flush=True)

    script = await record_session(args.port, stop, name=args.name, host=args.host, on_ready=ready)
    Path(args.out).write_text(dumps_script(script), encoding="utf-8")
    print(f"wrote {len(script.steps)} steps to {args.out}")
    return EXIT_OK


async def _cmd_report(args) -> int:
    run_dir = Path(args.rundir)
    if not (run_dir / "meta.json").exists():
        raise ValidationError(f"{run_dir} is not a run directory (no meta.json)")
    report = load_run_dir(run_dir)
    emit_report(report, args.out)
    print(f"report: {Path(args.out) / 'report.html'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lodestar", description="Scripted virtual-user load testing.")
    parser.add_argument("--version", action="version", version=f"lodestar {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("scenario")
    p.add_argument("--agents", help="comma-separated host:port list; omit for local mode")
    p.add_argument("--out", help="run directory (default runs/<name>-<timestamp>)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("agent", help="serve as a remote load generator")
    p.add_argument("--listen", type=int, required=True, metavar="PORT")
    p.add_argument("--capacity", type=int, required=True, metavar="N")
    p.add_argument("--tag", default="default")
    p.add_argument("--host", default="0.0.0.0")
    p.set_defaults(func=_cmd_agent)

    p = sub.add_parser("testbed", help="serve the mock e-commerce target")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--latency-ms", type=float, default=50.0)
    p.add_argument("--slots", type=int, default=10)
    p.add_argument("--error-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=_cmd_testbed)

    p = sub.add_parser("record", help="record a script through an HTTP proxy")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--name", default="recorded")
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=_cmd_record)

    p = sub.add_parser("report", help="regenerate reports from a run directory")
    p.add_argument("rundir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return asyncio.run(args.func(args))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LodestarError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except KeyboardInterrupt:
        return EXIT_ABORTED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
