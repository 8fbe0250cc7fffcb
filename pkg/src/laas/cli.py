"""Command-line entry points: simulate, eval, serve, replay, broker."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading
from dataclasses import fields
from pathlib import Path

from . import sim
from .evaluation import (
    BIAS,
    SIGMA_HEADING,
    ExperimentConfig,
    compute_metrics,
    run_experiment,
    run_table,
    table_csv,
    table_text,
)
from .measurement import CorrectedPosition

log = logging.getLogger("laas")


class CliError(Exception):
    """Reported as ``error: ...`` with exit code 1."""


def _error_config(args) -> sim.ErrorModelConfig:
    base = {"bias_east": BIAS[0], "bias_north": BIAS[1], "sigma_pos": 0.0, "sigma_vel": 0.0, "sigma_heading": SIGMA_HEADING, "seed": 0}
    if args.errors:
        p = Path(args.errors)
        if not p.exists():
            raise CliError(f"error model file not found: {p}")
        try:
            given = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{p}: invalid JSON ({exc})") from None
        allowed = {f.name for f in fields(sim.ErrorModelConfig)}
        if not isinstance(given, dict) or set(given) - allowed:
            raise CliError(f"{p}: expected an object with keys from {sorted(allowed)}")
        base.update(given)
    for key in ("sigma_pos", "sigma_vel", "seed"):
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    if args.bias is not None:
        base["bias_east"], base["bias_north"] = args.bias
    try:
        return sim.ErrorModelConfig(**base)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad error model: {exc}") from None


def cmd_simulate(args) -> int:
    if args.scenario != "default":
        raise CliError(f"unknown scenario {args.scenario!r}")
    cfg = _error_config(args)
    hd_map, schedules = sim.default_scenario()
    truth = sim.generate_ground_truth(hd_map, schedules, args.duration, args.rate)
    meas = sim.apply_error_model(truth, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim.write_truth_csv(out / "truth.csv", truth)
    sim.write_measurements(out, meas, truth)
    (out / "errors.json").write_text(json.dumps({f.name: getattr(cfg, f.name) for f in fields(cfg)}, indent=2) + "\n")
    print(f"wrote {len(truth)} samples for {len(schedules)} users to {out}")
    return 0


def cmd_eval(args) -> int:
    if args.table:
        rows = run_table(args.runs, args.seed, args.jobs)
        text = table_csv(rows)
        print(table_text(rows))
    else:
        cfg = ExperimentConfig(args.sigma_pos or 0.0, args.sigma_vel or 0.0, not args.no_kalman, n_runs=args.runs, base_seed=args.seed)
        res = run_experiment(cfg, args.jobs)
        names = [f.name for f in fields(res)]
        text = ",".join(names) + "\n" + ",".join("" if getattr(res, n) is None else repr(getattr(res, n)) for n in names) + "\n"
        print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _load_service_config(args):
    from .service import ServiceConfig

    cfg = ServiceConfig.from_file(args.config) if args.config else ServiceConfig.from_dict({})
    if args.broker:
        from dataclasses import replace

        cfg = replace(cfg, broker=args.broker)
    return cfg


def cmd_serve(args) -> int:
    from .service import LaasService, MqttBus

    cfg = _load_service_config(args)
    hd_map = cfg.load_map()
    bus = MqttBus(cfg.broker)
    service = LaasService(bus, hd_map, cfg)
    service.start()
    print(f"serving on {cfg.broker}, cluster {cfg.cluster!r}, epoch {cfg.epoch_period_ms} ms", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    service.stop()
    bus.close()
    log.info("counters: %s", dict(service.counters))
    return 0


def _write_corrections(path: Path, corrections: list[CorrectedPosition]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "timestamp_ms", "lane_id", "lat", "lon", "confidence"])
        for c in corrections:
            w.writerow([c.user_id, c.timestamp_ms, c.lane_id, repr(c.position.latitude), repr(c.position.longitude), repr(c.confidence)])


def cmd_replay(args) -> int:
    from .service import MqttBus, ReplayClient

    src = Path(args.in_dir)
    if not (src / "streams").is_dir():
        raise CliError(f"no streams directory in {src}")
    streams = sim.read_streams(src)
    if not streams:
        raise CliError(f"{src / 'streams'} holds no .ndjson files")
    bus = MqttBus(args.broker, max_attempts=args.connect_attempts)
    try:
        client = ReplayClient(bus, args.cluster, wrap=args.wrap)
        result = client.replay(streams, realtime=args.realtime, period_s=args.period)
    finally:
        bus.close()
    n = sum(len(v) for v in streams.values())
    print(f"sent {n} fixes from {len(streams)} clients, received {len(result.corrections)} corrections")
    for q in (50, 95, 99):
        print(f"latency p{q}: {result.latency_percentile(q) * 1000:.1f} ms")
    if args.out:
        _write_corrections(Path(args.out), result.corrections)
    truth_path = src / "truth.csv"
    if truth_path.exists():
        truth = sim.read_truth_csv(truth_path)
        got = {(c.user_id, c.timestamp_ms) for c in result.corrections}
        meas = {(u, m.timestamp_ms): m for u, ms in streams.items() for m in ms}
        est = list(result.corrections) + [
            CorrectedPosition.unmatched(u, t, m.position) for (u, t), m in meas.items() if (u, t) not in got
        ]
        res = compute_metrics(est, [g for g in truth if (g.user_id, g.timestamp_ms) in meas], sim.load_default_map())
        print(f"aed {res.aed:.3f} m, accuracy {res.accuracy:.3f}")
    return 0


def cmd_broker(args) -> int:
    from .service.broker import LoopbackBroker

    broker = LoopbackBroker(args.host, args.port).start()
    print(f"broker listening on {broker.address}", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    broker.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laas", description="Cooperative lane-level positioning toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate ground truth and noisy fix streams")
    s.add_argument("--scenario", default="default")
    s.add_argument("--errors", help="JSON file with error model fields")
    s.add_argument("--sigma-pos", dest="sigma_pos", type=float)
    s.add_argument("--sigma-vel", dest="sigma_vel", type=float)
    s.add_argument("--bias", type=float, nargs=2, metavar=("EAST", "NORTH"))
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float, default=sim.DEFAULT_DURATION_S)
    s.add_argument("--rate", type=float, default=sim.DEFAULT_RATE_HZ)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="run the offline evaluation")
    e.add_argument("--table", action="store_true", help="all noise levels with and without Kalman")
    e.add_argument("--runs", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--sigma-pos", dest="sigma_pos", type=float)
    e.add_argument("--sigma-vel", dest="sigma_vel", type=float)
    e.add_argument("--no-kalman", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("serve", help="run the positioning service against a broker")
    v.add_argument("--config")
    v.add_argument("--broker", help="overrides config and LAAS_BROKER")
    v.set_defaults(func=cmd_serve)

    r = sub.add_parser("replay", help="play recorded streams as anonymous clients")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--broker", required=True)
    r.add_argument("--cluster", default="local")
    r.add_argument("--realtime", action="store_true")
    r.add_argument("--period", type=float, default=1.0, help="seconds between ticks in realtime mode")
    r.add_argument("--wrap", action="store_true", help="send base64-enveloped payloads")
    r.add_argument("--connect-attempts", type=int, default=5)
    r.add_argument("--out", help="CSV of received corrections")
    r.set_defaults(func=cmd_replay)

    b = sub.add_parser("broker", help="run a loopback MQTT broker (needs amqtt)")
    b.add_argument("--host", default="127.0.0.1")
    b.add_argument("--port", type=int, default=1883)
    b.set_defaults(func=cmd_broker)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", 1) < 1:
        parser.error("--runs must be at least 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
