"""Command line entry point: ``visric <command> ...``.

Exit codes: 0 success, 1 invariant or audit failure, 2 usage error,
3 bind failure, 4 connect/setup failure, 5 component failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_AUDIT, EXIT_USAGE, EXIT_BIND, EXIT_CONNECT, EXIT_COMPONENT = 0, 1, 2, 3, 4, 5

ENV_AGENT_ENDPOINT = "VISRIC_AGENT_ENDPOINT"
ENV_XAPP_ENDPOINT = "VISRIC_XAPP_ENDPOINT"


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}") from None


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------- commands


def cmd_broker(args) -> int:
    from .broker import BrokerError, main_loop

    stats_stream = open(args.stats_file, "a") if args.stats_file else sys.stderr
    try:
        stats = main_loop((args.host, args.agents_port), (args.host, args.xapps_port),
                          stats_interval_s=args.stats_interval, stats_stream=stats_stream,
                          queue_limit=args.queue_limit)
    except BrokerError as exc:
        logging.error("%s", exc)
        return EXIT_BIND
    finally:
        if args.stats_file:
            stats_stream.close()
    return EXIT_AUDIT if stats.audit() else EXIT_OK


def _connect_errors():
    from .agent import AgentConnectionLost, SetupRejected
    return (ConnectionRefusedError, SetupRejected, AgentConnectionLost, TimeoutError, OSError)


def cmd_agent(args) -> int:
    from .agent import LoadProfile, run_cvf_agent, run_load_agent, run_radio_agent
    from .usecase import canonical_scenario, load_scenario

    try:
        if args.kind == "load":
            profile = LoadProfile(args.agent_id, args.size, args.rate, args.duration)
            report = run_load_agent(profile, args.broker)
        else:
            spec = load_scenario(args.scenario) if args.scenario else canonical_scenario()
            duration = args.duration if args.duration is not None else spec.duration_s
            if args.kind == "cvf":
                report = run_cvf_agent(spec.scene, spec.cvf, args.broker, agent_id=args.agent_id or 100,
                                       duration_s=duration, time_scale=args.time_scale)
            else:
                report = run_radio_agent(spec.radio, spec.scene, args.broker, agent_id=args.agent_id or 200,
                                         duration_s=duration, time_scale=args.time_scale)
    except ValueError as exc:
        logging.error("configuration error: %s", exc)
        return EXIT_USAGE
    except _connect_errors() as exc:
        logging.error("cannot reach broker at %s: %s", args.broker, exc)
        return EXIT_CONNECT
    _print_json(report.to_dict())
    return EXIT_COMPONENT if report.failed else EXIT_OK


_SUBSCRIBE_SETS = {
    "all": None,
    "cvf": "cvf",
    "snr": "snr",
    "usecase": "usecase",
}


def cmd_xapp(args) -> int:
    from .wire import FilterEntry, PayloadKind
    from .xapp import CVF_KINDS, SessionError, XAppSession, detect_transitions, fuse, kinds_filter

    if args.subscribe == "all":
        filters = frozenset({FilterEntry(None, None)})
    elif args.subscribe == "cvf":
        filters = kinds_filter(CVF_KINDS)
    elif args.subscribe == "snr":
        filters = kinds_filter([PayloadKind.SNR_REPORT])
    else:
        filters = kinds_filter(CVF_KINDS + (PayloadKind.SNR_REPORT,))
    try:
        session = XAppSession(args.broker, args.xapp_id)
        session.subscribe(filters)
    except (SessionError, OSError) as exc:
        logging.error("xApp session failed: %s", exc)
        return EXIT_CONNECT
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    deadline = time.monotonic() + args.duration if args.duration else None
    while not stop.is_set() and (deadline is None or time.monotonic() < deadline):
        stop.wait(0.1)
    session.close()
    timeline = fuse(session.records, fps=args.fps, interval_ms=1000 // args.fps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fused_timeline.csv").write_text(timeline.to_csv())
    (out / "cvf_events.csv").write_text(timeline.cvf_events_csv())
    tr = detect_transitions(timeline)
    (out / "transitions.json").write_text((tr.normalized(timeline.interval_ms) if args.normalize_timestamps
                                           else tr).to_json())
    _print_json({"received": session.received, "out": str(out)})
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchConfig, Cell, run_sweep, trend_violations

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    for key, val in (("duration_s", args.duration), ("repetitions", args.repetitions), ("mode", args.mode),
                     ("route_delay_us", args.route_delay_us)):
        if val is not None:
            base[key] = val
    if args.keep_raw:
        base["keep_raw"] = True
    single = args.agents is not None and args.size is not None and args.rate is not None
    try:
        if single:
            base.update(agents=(args.agents,), sizes_bytes=(args.size,), rates_per_agent=(args.rate,))
            config = BenchConfig.from_dict(base)
            cells = [Cell(args.agents, args.size, args.rate)]
        else:
            for key, val in (("agents", args.agents_list), ("sizes_bytes", args.sizes), ("rates_per_agent", args.rates)):
                if val is not None:
                    base[key] = val
            config = BenchConfig.from_dict(base)
            cells = None
    except (ValueError, TypeError) as exc:
        logging.error("invalid bench configuration: %s", exc)
        return EXIT_USAGE
    report = run_sweep(config, cells)
    paths = report.write(args.out)
    doc = report.to_dict()
    doc["outputs"] = {k: str(v) for k, v in paths.items()}
    if not single:
        doc["trend_violations"] = trend_violations(report)
    _print_json(doc)
    if not report.invariants_ok:
        return EXIT_AUDIT
    if any(not c.valid for c in report.cells):
        return EXIT_COMPONENT
    return EXIT_OK


def cmd_usecase(args) -> int:
    from dataclasses import replace

    from .usecase import UseCaseError, canonical_scenario, load_scenario, run_usecase

    try:
        spec = load_scenario(args.scenario) if args.scenario else canonical_scenario()
        if args.seed is not None:
            spec = replace(spec, radio=replace(spec.radio, rng_seed=args.seed))
        if args.time_scale is not None:
            spec = replace(spec, time_scale=args.time_scale)
        spec.validate()
    except (ValueError, KeyError, OSError) as exc:
        logging.error("invalid scenario: %s", exc)
        return EXIT_USAGE
    try:
        result = run_usecase(spec, args.out or spec.output_dir, normalize_timestamps=args.normalize_timestamps,
                             processes=args.processes)
    except UseCaseError as exc:
        logging.error("use case failed: %s", exc)
        return EXIT_COMPONENT
    doc = dict(result.summary)
    doc["outputs"] = {k: str(v) for k, v in result.paths.items()}
    doc["transitions"] = result.transitions.to_dict()
    _print_json(doc)
    return EXIT_OK


def cmd_scene(args) -> int:
    from .scene import frames_to_csv, iter_frames
    from .usecase import canonical_scenario, load_scenario

    spec = load_scenario(args.scenario) if args.scenario else canonical_scenario()
    n = args.frames if args.frames is not None else spec.n_frames
    text = frames_to_csv(spec.scene, list(iter_frames(spec.scene, n)))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    env_agent = os.environ.get(ENV_AGENT_ENDPOINT, "127.0.0.1:36421")
    env_xapp = os.environ.get(ENV_XAPP_ENDPOINT, "127.0.0.1:36422")
    p = argparse.ArgumentParser(prog="visric", description="Vision-radio RIC simulator")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("broker", help="run the broker until SIGINT/SIGTERM")
    b.add_argument("--host", default="127.0.0.1")
    b.add_argument("--agents-port", type=int, default=_endpoint(env_agent)[1])
    b.add_argument("--xapps-port", type=int, default=_endpoint(env_xapp)[1])
    b.add_argument("--stats-interval", type=float, default=1.0, help="seconds between stats lines")
    b.add_argument("--stats-file", help="append JSON stats lines here instead of stderr")
    b.add_argument("--queue-limit", type=int, default=65_536)
    b.set_defaults(func=cmd_broker)

    a = sub.add_parser("agent", help="run one agent")
    a.add_argument("kind", choices=("load", "cvf", "radio"))
    a.add_argument("--broker", type=_endpoint, default=_endpoint(env_agent), help="agent endpoint host:port")
    a.add_argument("--agent-id", type=int, default=None)
    a.add_argument("--rate", type=int, default=1000, help="load: messages per second")
    a.add_argument("--size", type=int, default=16, help="load: pad bytes per message")
    a.add_argument("--duration", type=float, default=None, help="seconds (load default 1)")
    a.add_argument("--scenario", help="cvf/radio: scenario JSON (default: canonical)")
    a.add_argument("--time-scale", type=float, default=1.0)
    a.set_defaults(func=cmd_agent)

    x = sub.add_parser("xapp", help="run the vision-aided xApp")
    x.add_argument("mode", choices=("fuse",))
    x.add_argument("--broker", type=_endpoint, default=_endpoint(env_xapp), help="xApp endpoint host:port")
    x.add_argument("--xapp-id", type=int, default=1)
    x.add_argument("--subscribe", choices=tuple(_SUBSCRIBE_SETS), default="usecase")
    x.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    x.add_argument("--fps", type=int, default=5)
    x.add_argument("--out", default="xapp_out")
    x.add_argument("--normalize-timestamps", action="store_true")
    x.set_defaults(func=cmd_xapp)

    be = sub.add_parser("bench", help="latency sweep")
    be.add_argument("--config", help="BenchConfig JSON")
    be.add_argument("--agents", type=int, help="single cell: agent count")
    be.add_argument("--size", type=int, help="single cell: pad bytes")
    be.add_argument("--rate", type=int, help="single cell: messages/s per agent")
    be.add_argument("--agents-list", type=_int_list, help="sweep agent counts, e.g. 1,2,4")
    be.add_argument("--sizes", type=_int_list)
    be.add_argument("--rates", type=_int_list)
    be.add_argument("--mode", choices=("views", "grid"))
    be.add_argument("--duration", type=float)
    be.add_argument("--repetitions", type=int)
    be.add_argument("--route-delay-us", type=float, help="emulate a slow broker")
    be.add_argument("--keep-raw", action="store_true", help="also write raw_records.csv")
    be.add_argument("--out", default="bench_out")
    be.set_defaults(func=cmd_bench)

    u = sub.add_parser("usecase", help="end-to-end blockage use case")
    u.add_argument("--scenario", help="scenario JSON (default: canonical)")
    u.add_argument("--out")
    u.add_argument("--seed", type=int)
    u.add_argument("--time-scale", type=float, help="wall seconds per scene second")
    u.add_argument("--normalize-timestamps", action="store_true")
    u.add_argument("--processes", action="store_true", help="one process per component")
    u.set_defaults(func=cmd_usecase)

    s = sub.add_parser("scene", help="export scene frames as CSV")
    s.add_argument("--scenario")
    s.add_argument("--frames", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_scene)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "kind", None) == "load" and args.duration is None:
        args.duration = 1.0
    if getattr(args, "kind", None) == "load" and args.agent_id is None:
        args.agent_id = 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
