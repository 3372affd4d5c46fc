"""Command-line entry point ``qlink-sim``.

Exit codes: 0 success, 2 configuration error, 3 acceptance or defense failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from ..adversary import AttackKind, AttackScenario, Label, run_attack
from ..errors import ConfigError, InvalidScenario
from .config import ScenarioConfig, default_bridge_config
from .engine import EventLog
from .experiments import build_system, loss_ok, run_bridge_scenario, run_committee_experiment, run_keyrate_experiment
from .metrics import IoError, Metrics, export_metrics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


def _seed(value: str) -> int:
    seed = int(value, 0)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's missing --seed from clobbering the global one
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS, help="64-bit simulation seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="write metrics/outcome here")
    common.add_argument("--format", choices=["json", "csv"], default=argparse.SUPPRESS)
    common.add_argument("--event-log", default=argparse.SUPPRESS, help="write the JSON-lines event log here")

    parser = argparse.ArgumentParser(prog="qlink-sim", description="Quantum-secured bridge simulator",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keyrate", parents=[common], help="key generation vs packetized demand on one link")
    p.add_argument("--distance-km", type=float, required=True)
    p.add_argument("--duration-s", type=float, required=True)
    p.add_argument("--traffic-kbps", type=float, default=20.0)

    p = sub.add_parser("bridge", parents=[common], help="end-to-end lock/mint scenario")
    p.add_argument("--config", help="scenario JSON (defaults to the built-in BTC->ETH scenario)")

    p = sub.add_parser("committee", parents=[common], help="full-mesh committee run")
    p.add_argument("--n", type=int, choices=[7, 8, 9], required=True)
    p.add_argument("--config", help="scenario JSON overriding links and timing")
    p.add_argument("--distance-km", type=float, default=5.0)
    p.add_argument("--duration-s", type=float, default=10.0)

    p = sub.add_parser("attack", parents=[common], help="run one scripted attack")
    p.add_argument("--scenario", required=True, type=str.upper, choices=[k.value for k in AttackKind])
    p.add_argument("--config", help="scenario JSON for the system under attack")
    p.add_argument("--research-mode", action="store_true")
    return parser


def _load(path: str | None, seed: int | None, **defaults) -> ScenarioConfig:
    cfg = ScenarioConfig.load(path) if path else default_bridge_config(**defaults)
    if seed is not None:
        cfg.seed = seed
        cfg.validate()
    return cfg


def _emit(metrics: list[Metrics], args) -> None:
    out = getattr(args, "out", None)
    if out:
        export_metrics(metrics, getattr(args, "format", "json"), out)
    json.dump([asdict(m) for m in metrics], sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


def _write_log(log: EventLog, args) -> None:
    path = getattr(args, "event_log", None)
    if path:
        log.write(path)


def _keyrate(args) -> int:
    log = EventLog()
    m = run_keyrate_experiment(args.distance_km, args.duration_s, args.traffic_kbps,
                               seed=getattr(args, "seed", 0), log=log)
    _write_log(log, args)
    _emit([m], args)
    sound = m.extra["conservation_violations"] == 0 and m.extra["ranges_disjoint"]
    return EXIT_OK if sound and loss_ok(m) else EXIT_FAILURE


def _bridge(args) -> int:
    cfg = _load(args.config, getattr(args, "seed", None))
    log = EventLog()
    run = run_bridge_scenario(cfg, log)
    _write_log(log, args)
    _emit([run.metrics], args)
    return EXIT_OK if not run.failures and run.metrics.extra["dual_condition"] else EXIT_FAILURE


def _committee(args) -> int:
    seed = getattr(args, "seed", 0)
    log = EventLog()
    if args.config:
        cfg = _load(args.config, seed)
        run = run_committee_experiment(args.n, args.distance_km, cfg.duration_s, seed=cfg.seed, log=log,
                                       config=cfg)
    else:
        run = run_committee_experiment(args.n, args.distance_km, args.duration_s, seed=seed, log=log)
    _write_log(log, args)
    _emit(run.links, args)
    print(json.dumps({"n": args.n, "threshold": run.threshold, "heights": len(run.heights),
                      "all_finalized": run.all_finalized,
                      "per_validator_bps": {str(k): round(v, 3) for k, v in run.per_validator_bps.items()}},
                     sort_keys=True), file=sys.stderr)
    return EXIT_OK if run.all_finalized else EXIT_FAILURE


def _attack(args) -> int:
    cfg = _load(args.config, getattr(args, "seed", None))
    log = EventLog()
    system = build_system(cfg, log)
    outcome = run_attack(AttackScenario(AttackKind(args.scenario), research_mode=args.research_mode), system)
    _write_log(log, args)
    summary = outcome.summary()
    out = getattr(args, "out", None)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if out:
        try:
            with open(out, "w") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            raise IoError(str(exc)) from exc
    print(text)
    if outcome.label is Label.EXPECTED_BREACH:
        return EXIT_OK
    return EXIT_OK if outcome.defended else EXIT_FAILURE


COMMANDS = {"keyrate": _keyrate, "bridge": _bridge, "committee": _committee, "attack": _attack}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidScenario) as exc:
        print(f"qlink-sim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"qlink-sim: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
