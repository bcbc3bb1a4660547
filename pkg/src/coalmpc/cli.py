"""Command-line interface: ``run``, ``mc`` and ``sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, SimulationConfig, config_from_dict, load_config, validate
from .sim import SolverFailure, monte_carlo, run_simulation, sweep, write_outputs, write_sweep_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _common(p):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--scenario", choices=("S1", "S2"))
    p.add_argument("--mode", choices=("centralized", "decentralized", "coalitional"))
    p.add_argument("--c-coal", type=float, dest="c_coal")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int, help="prediction horizon Np")
    p.add_argument("--steps", type=int, help="simulated steps T_sim")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coalmpc", description="Coalitional MPC simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    _common(sub.add_parser("run", help="single closed-loop simulation"))
    mc = sub.add_parser("mc", help="Monte Carlo batch")
    _common(mc)
    mc.add_argument("--runs", type=int, default=10)
    sw = sub.add_parser("sweep", help="Monte Carlo batches over cooperation-cost coefficients")
    _common(sw)
    sw.add_argument("--runs", type=int, default=10)
    sw.add_argument("--c-values", type=float, nargs="+", default=[1e-5, 1e-4, 5e-4, 1e-3])
    return parser


def _config(args) -> SimulationConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.scenario:
        cfg.model.scenario = args.scenario
    for attr, field_ in (("mode", "mode"), ("c_coal", "c_coal"), ("seed", "rng_seed"),
                         ("horizon", "Np"), ("steps", "T_sim")):
        v = getattr(args, attr)
        if v is not None:
            setattr(cfg, field_, v)
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.outputs.dir or args.out)
    try:
        if args.verb == "run":
            rep = run_simulation(cfg)
            paths = write_outputs(rep, out, cfg.outputs)
            print(json.dumps({"eta": rep.eta, "psi": rep.psi,
                              "mean_coalition_size": rep.mean_coalition_size,
                              "summary": str(paths["summary_json"])}))
        elif args.verb == "mc":
            res = monte_carlo(cfg, args.runs, cfg.rng_seed)
            out.mkdir(parents=True, exist_ok=True)
            (out / "mc.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
            print(json.dumps(res["stats"]))
        else:
            res = sweep(cfg, args.c_values, args.runs, cfg.rng_seed)
            out.mkdir(parents=True, exist_ok=True)
            write_sweep_csv(res, out / "sweep.csv")
            print(str(out / "sweep.csv"))
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
