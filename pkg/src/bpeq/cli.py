"""Command-line interface: validate, run, sweep, report, replay-estimate, serve.

Exit codes: 0 success, 1 config error, 2 run failure, 3 report failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .control import optimize_fixed_timing
from .estimation import EstimationDomainError, load_probe_log, replay
from .harness.config import ConfigError, ScenarioConfig, load_config
from .harness.report import FORMATS, ReportError, emit_report
from .harness.sweep import RunRecord, load_sweep, read_records, run_config, run_sweep, write_records
from .network import NetworkError, load_network
from .simulation import DemandError, ScenarioError
from .simulation.demand import validate_demand

OUT_DIR_ENV = "BPEQ_OUT_DIR"
RUNS_FILE = "runs.jsonl"

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_REPORT = 0, 1, 2, 3

log = logging.getLogger("bpeq")


def _out_dir(flag: str | None, config: ScenarioConfig | None = None) -> Path:
    if flag:
        return Path(flag)
    if config is not None and config.out_dir:
        path = Path(config.out_dir)
        return path if path.is_absolute() or config.base_dir is None else Path(config.base_dir) / path
    return Path(os.environ.get(OUT_DIR_ENV) or "out")


def _load(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config(args.config)
    overrides = {
        "penetration": getattr(args, "penetration", None),
        "controllers": getattr(args, "controller", None),
        "duration": getattr(args, "duration", None),
    }
    if getattr(args, "check_invariants", False):
        overrides["check_invariants"] = True
    if any(v is not None for v in overrides.values()):
        try:
            config = config.with_overrides(**overrides)
        except ValueError as exc:
            raise ConfigError(f"bad command-line override: {exc}", args.config) from None
    return config


def _report(records: list[RunRecord], out: Path, fmt: str) -> int:
    try:
        paths = emit_report(records, out, fmt)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    print((out / "summary.txt").read_text(), end="")
    log.info("wrote %d report files to %s", len(paths), out)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    if args.network:
        net = load_network(args.network)
        print(f"network ok: {len(net.links)} links, {len(net.lanes)} lanes, "
              f"{len(net.movements)} movements, {len(net.intersections)} intersections")
        for nid, node in net.intersections.items():
            print(f"  {nid}: phases {', '.join(p.id for p in node.phases) or '-'}")
        if not args.config:
            return EXIT_OK
    if not args.config:
        raise ConfigError("validate needs --config or --network")
    config = _load(args)
    net = config.load_network()
    profile = config.demand.profile()
    turning = validate_demand(profile, net)
    config.controller_map(net)
    print(f"config ok: {config.name}, network {config.network_path()} "
          f"({len(net.intersections)} intersections), {len(config.seeds)} seeds, "
          f"{config.duration:g} s in {config.window:g} s windows")
    rates = {lid: profile.mean_rate(lid, config.duration) for lid in profile.rates}
    plans = optimize_fixed_timing(net, rates, turning, config.control_params(), config.traffic.free_flow_speed)
    for nid, plan in plans.items():
        flag = "  OVERSATURATED" if plan.oversaturated else ""
        print(f"  fixed plan {nid}: cycle {plan.cycle:g} s, greens {list(plan.greens)}, offset {plan.offset:g} s{flag}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    out = _out_dir(args.out_dir, config)
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    failed = False
    for seed in seeds:
        events = out / f"events_seed{seed}.jsonl" if args.events else None
        try:
            rec = run_config(config, seed, events_path=events)
        except (ScenarioError, DemandError, NetworkError) as exc:
            raise ConfigError(str(exc), args.config) from None
        except Exception as exc:  # noqa: BLE001 - reported, exit code 2
            print(f"error: seed {seed} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            rec = RunRecord(config.name, "", config.penetration, seed, error=f"{type(exc).__name__}: {exc}")
            failed = True
        records.append(rec)
    write_records(records, out / RUNS_FILE)
    code = _report(records, out, args.format)
    return EXIT_RUN if failed else code


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_sweep(args.sweep)
    out = _out_dir(args.out_dir, spec.base)
    out.mkdir(parents=True, exist_ok=True)
    print(f"sweep: {spec.size} runs", file=sys.stderr)
    records = run_sweep(spec, workers=args.workers)
    write_records(records, out / RUNS_FILE)
    code = _report(records, out, args.format)
    if any(not r.ok for r in records):
        return EXIT_RUN
    return code


def cmd_report(args: argparse.Namespace) -> int:
    out = _out_dir(args.out_dir)
    runs = Path(args.runs) if args.runs else out / RUNS_FILE
    try:
        records = read_records(runs)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read run records {runs}: {exc}", file=sys.stderr)
        return EXIT_REPORT
    return _report(records, out, args.format)


def cmd_replay(args: argparse.Namespace) -> int:
    if args.network:
        net = load_network(args.network)
        params = None
    else:
        config = _load(args)
        net = config.load_network()
        params = config.estimator_params()
    if params is None:
        from .estimation import EstimatorParams

        params = EstimatorParams.for_reporting_interval(args.interval)
    try:
        readings = load_probe_log(args.probes)
    except OSError as exc:
        raise ConfigError(f"cannot read probe log: {exc.strerror}", args.probes) from None
    except ValueError as exc:
        raise ConfigError(f"bad probe log: {exc}", args.probes) from None
    links = sorted(net.links)
    stream = sys.stdout if not args.output else open(args.output, "w", newline="")
    try:
        writer = csv.writer(stream, lineterminator="\n") if args.format == "csv" else None
        if writer:
            writer.writerow(["t", *links])
        for fld, queues in replay(net, readings, params, args.at or None):
            if writer:
                writer.writerow([f"{fld.t:g}", *(f"{queues[l]:.6f}" for l in links)])
            else:
                stream.write(json.dumps({"t": fld.t, "queues": {l: round(queues[l], 6) for l in links}}) + "\n")
    except EstimationDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpeq", description="Backpressure signal control with estimated queues.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--penetration", type=float, help="connected-vehicle share in [0, 1]")
        sp.add_argument("--controller", choices=["bp_perfect", "bp_eq", "fixed"], help="one controller kind for every intersection")
        sp.add_argument("--duration", type=str, help="simulated time, e.g. 3600 or '1 h'")

    sp = sub.add_parser("validate", help="check a scenario config and/or network document")
    sp.add_argument("--config")
    sp.add_argument("--network")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("run", help="run a scenario for its seeds (or one --seed)")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")
    sp.add_argument("--format", choices=FORMATS, default="csv")
    sp.add_argument("--events", action="store_true", help="also write the event log (spawn, cross, exit, phase, probe)")
    sp.add_argument("--check-invariants", action="store_true", help="assert simulator invariants on every tick")
    overrides(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a sweep file over controllers, penetration rates and seeds")
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--out-dir")
    sp.add_argument("--format", choices=FORMATS, default="csv")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="rebuild report files from stored run records")
    sp.add_argument("--out-dir")
    sp.add_argument("--runs", help=f"run records (default <out-dir>/{RUNS_FILE})")
    sp.add_argument("--format", choices=FORMATS, default="csv")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("replay-estimate", help="estimate link queues offline from a probe log")
    sp.add_argument("--probes", required=True, help="probe log: JSONL event log or CSV vehicle,lane,x,t,v")
    sp.add_argument("--config")
    sp.add_argument("--network")
    sp.add_argument("--interval", type=float, default=10.0, help="reporting interval when only --network is given")
    sp.add_argument("--at", type=float, action="append", help="evaluation time (repeatable); default every batch")
    sp.add_argument("--format", choices=FORMATS, default="csv")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("serve", help="start the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay-estimate" and not (args.config or args.network):
        print("error: replay-estimate needs --config or --network", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, NetworkError, DemandError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
