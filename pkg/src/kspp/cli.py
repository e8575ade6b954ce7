"""Command-line entry point.

Exit codes: 0 when all verdicts pass, 1 when a verdict fails, 2 for
configuration errors and refused preconditions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import build_model, build_scenario, load_raw_config
from .experiments import (
    RefusalError,
    persist_experiment,
    run_experiment,
    write_manifest,
    write_results_csv,
)
from .model import ConfigurationError
from .rngstream import StorageCapError
from .simulate import run_particle_system

_EXPERIMENT_COMMANDS = {
    "poc-finite": "poc_finite",
    "poc-uniform": "poc_uniform",
    "euler-rate": "euler_rate",
    "concentration": "concentration",
    "field-bounds": "field_bounds",
}


def _add_common(parser: argparse.ArgumentParser, needs_out: bool) -> None:
    parser.add_argument("--config", required=True, help="TOML config or manifest.json")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker count (overrides KSPP_WORKERS)")
    if needs_out:
        parser.add_argument("--out", required=True, help="output directory")
    else:
        parser.add_argument("--out", default=None, help="output directory (optional)")


def _workers(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("KSPP_WORKERS")
    return max(1, int(env)) if env else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kspp",
        description="Simulate and verify chemotaxis particle systems with a dynamic chemical field")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("constants", help="print theoretical constants and the assumption check")
    _add_common(p, needs_out=False)

    p = sub.add_parser("simulate", help="run one particle system and write trajectories")
    _add_common(p, needs_out=True)

    for cmd, _exp in _EXPERIMENT_COMMANDS.items():
        p = sub.add_parser(cmd, help=f"run the {cmd.replace('-', ' ')} experiment")
        _add_common(p, needs_out=True)
    return parser


def _cmd_constants(args) -> int:
    cfg = load_raw_config(args.config)
    model = build_model(cfg)
    payload = {"constants": model.constants().to_dict(),
               "assumption": model.assumption_report().to_dict()}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_simulate(args) -> int:
    cfg = load_raw_config(args.config)
    sc = build_scenario(cfg, "simulate", seed=args.seed, workers=_workers(args))
    started = time.time()
    run_cfg = sc.base_config(record_trajectory=True)
    rec = run_particle_system(sc.model, run_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj_rows = []
    for n in range(rec.trajectory.shape[0]):
        t = rec.times[n]
        for i in range(rec.trajectory.shape[1]):
            row = {"step": n, "t": t, "particle_id": i}
            for d in range(rec.trajectory.shape[2]):
                row[f"x{d}"] = rec.trajectory[n, i, d]
            traj_rows.append(row)
    write_results_csv(out / "trajectory.csv", traj_rows,
                      {"experiment": "simulate", "seed": sc.seed})
    moment_rows = [{"step": n, "t": rec.times[n],
                    "mean": rec.mean[n, 0] if rec.mean.shape[1] == 1 else float("nan"),
                    "m2": rec.m2[n]}
                   for n in range(len(rec.times))]
    write_results_csv(out / "moments.csv", moment_rows,
                      {"experiment": "simulate", "seed": sc.seed})
    write_manifest(out, sc, None, started, time.time(),
                   outputs=["trajectory.csv", "moments.csv"])
    print(f"simulate: {run_cfg.n_steps} steps, {run_cfg.n_particles} particles, "
          f"max grad violation {rec.max_grad_violation:.3e}")
    return 0


def _cmd_experiment(args, experiment: str) -> int:
    cfg = load_raw_config(args.config)
    sc = build_scenario(cfg, experiment, seed=args.seed, workers=_workers(args))
    started = time.time()
    result = run_experiment(sc)
    persist_experiment(sc, result, args.out, started)
    for name, ok in sorted(result.verdicts.items()):
        print(f"{experiment}: {name}: {'pass' if ok else 'FAIL'}")
    return 0 if result.passed else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "constants":
            return _cmd_constants(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_experiment(args, _EXPERIMENT_COMMANDS[args.command])
    except (ConfigurationError, RefusalError, StorageCapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
