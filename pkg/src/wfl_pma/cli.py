"""Command line entry point.

    wfl-pma run --config cfg.yaml [--seed 3] [--out runs/x] [--threads 1] [--policy lyapunov]
    wfl-pma sweep --config cfg.yaml --axis V --values 0.001,0.01,0.1
    wfl-pma bounds --metrics runs/x/seed_0/metrics.csv --L-u 2.0 --rho 0.3 --delta 0.5 --initial-gap 1.0
    wfl-pma validate-config --config cfg.yaml
    wfl-pma gen-devices --config cfg.yaml --seed 0 --out devices.csv

Exit codes: 0 success, 1 configuration error, 2 runtime or solver failure,
3 file system failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import bounds as B
from .config import POLICIES, SWEEP_AXES, ConfigError, ExperimentConfig, dump_config, load_config
from .data import DataConfigError
from .experiment import SchemaError, build_population, check_bounds, fmt, run_experiment, run_sweep
from .resopt import SolverError
from .sysmodel import DomainError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
log = logging.getLogger("wfl_pma")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "policy", None):
        changes["scheduler.policy"] = args.policy
    if getattr(args, "out", None):
        changes["run.out"] = args.out
    if getattr(args, "threads", None):
        changes["run.threads"] = args.threads
    if getattr(args, "seed", None) is not None:
        changes["run.seeds"] = [args.seed]
    return cfg.replace(**changes) if changes else cfg


def _parse_values(axis: str, text: str) -> list:
    conv = int if axis == "split_depth" else float
    try:
        vals = [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: cannot read {text!r} as a list of {conv.__name__}")
    if not vals:
        raise ConfigError("--values: at least one value needed")
    return vals


def cmd_run(args) -> int:
    cfg = _config(args)
    results = run_experiment(cfg)
    for res in results:
        last = res.rows[-1] if res.rows else None
        msg = f"seed {res.seed}: {len(res.rows)} rounds"
        if last is not None and last["mean_accuracy"] == last["mean_accuracy"]:
            msg += f", final mean accuracy {last['mean_accuracy']:.4f}"
        print(msg)
    print(f"wrote {Path(cfg.run.out).resolve()}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    path = run_sweep(cfg, args.axis, _parse_values(args.axis, args.values))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    if args.config:
        b = load_config(args.config)
        sec, eta = b.bounds, b.learning.eta_u
        vals = dict(L_u=sec.L_u, L_v=sec.L_v, chi=sec.chi, delta=sec.delta, rho=sec.rho)
        gap = sec.initial_gap
    else:
        vals, eta, gap = {}, 0.05, None
    for name in ("L_u", "L_v", "chi", "delta", "rho"):
        given = getattr(args, name)
        if given is not None:
            vals[name] = given
    eta = args.eta_u if args.eta_u is not None else eta
    gap = args.initial_gap if args.initial_gap is not None else gap
    if vals.get("L_u") is None:
        raise ConfigError("bounds: L_u is required (--L-u or bounds.L_u in the config)")
    if gap is None:
        raise ConfigError("bounds: initial gap is required (--initial-gap or bounds.initial_gap)")
    consts = B.BoundConstants(eta_u=eta, **{k: v for k, v in vals.items() if v is not None})
    if not consts.step_ok():
        print(f"warning: eta_u={eta} exceeds 1/((chi+1) L_u)={consts.step_limit:.6g}",
              file=sys.stderr)
    out = check_bounds(args.metrics, consts, gap, args.out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(dump_config(cfg), end="")
    return EXIT_OK


def cmd_gen_devices(args) -> int:
    cfg = _config(args)
    seed = cfg.run.seeds[0]
    pop = build_population(cfg, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "data_size", "cycles_per_sample", "f_max", "p_max",
                    "energy_budget", "distance", "kappa"])
        for p in pop.profiles:
            w.writerow([fmt(v) for v in (p.id, p.data_size, p.cycles_per_sample, p.f_max,
                                         p.p_max, p.energy_budget, p.distance, p.kappa)])
    print(f"wrote {len(pop.profiles)} devices to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wfl-pma", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (overrides run.out)"):
        p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
        p.add_argument("--out", help=out_help)
        p.add_argument("--threads", type=int, help="local-update threads; 1 is bitwise reproducible")
        p.add_argument("--policy", choices=POLICIES)

    p = sub.add_parser("run", help="simulate one configuration")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="simulate one axis of values")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bounds", help="add A_t and bound_t columns to a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--config", help="take constants from the bounds section")
    p.add_argument("--out", help="output CSV (default: <metrics>_bounds.csv)")
    for name in ("L_u", "L_v", "chi", "delta", "rho", "eta_u", "initial_gap"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("validate-config", help="parse a config and print it resolved")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-devices", help="write the seeded device population as CSV")
    common(p, out_help="output CSV path")
    p.set_defaults(func=cmd_gen_devices)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen-devices" and not args.out:
        print("error: gen-devices needs --out", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DataConfigError, SchemaError, DomainError, B.BoundsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"io error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
