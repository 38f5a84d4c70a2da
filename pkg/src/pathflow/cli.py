"""Command line entry point: ``pathflow <experiment> [flags]``.

Exit codes: 0 every check passed, 1 some check failed, 2 configuration
error, 3 solver or integration failure (a partial report is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigurationError, IntegrationError, SolverError
from .experiments import EXPERIMENTS, FORMULAS, PROCESSES, STUDIES, ExperimentConfig, run_experiment
from .geometry import parse_manifold

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

# flag name -> config field
_FLAGS = {
    "steps": int, "paths": int, "seed": int, "t": float, "shift": str, "bound": float,
    "formula": str, "tsteps": int, "kind": str, "functional": str, "process": str,
    "batch": int, "study": str, "slack_constant": float, "dump": str,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pathflow", description="Stochastic analysis on path space: verifiers and experiments.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="experiment")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON file with configuration keys; flags override it")
        p.add_argument("--manifold", help="sphere2, sphere3, flat2, ... (a trailing digit sets the dimension)")
        p.add_argument("--dim", type=int)
        p.add_argument("--steps", type=int, help="time grid size n_steps")
        p.add_argument("--paths", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--t", type=float, help="flow time")
        p.add_argument("--shift", help="constant|linear|sinusoid|adapted|adapted_sinusoid")
        p.add_argument("--bound", type=float, help="Cameron-Martin energy bound")
        p.add_argument("--formula", choices=FORMULAS)
        p.add_argument("--tsteps", type=int, help="flow steps in t")
        p.add_argument("--kind", choices=("bismut", "damped"))
        p.add_argument("--functional", help="comma separated functional names")
        p.add_argument("--process", choices=PROCESSES)
        p.add_argument("--batch", type=int)
        p.add_argument("--study", choices=STUDIES)
        p.add_argument("--grids", help="comma separated grid sizes for convergence")
        p.add_argument("--slack-constant", dest="slack_constant", type=float)
        p.add_argument("--dump", help="write one rolled path as CSV (simulate)")
        p.add_argument("--out", help="CSV report path; a .json sidecar is written next to it")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args):
    data = {}
    if args.config:
        try:
            with open(args.config) as handle:
                data = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        if data.get("experiment", args.experiment) != args.experiment:
            raise ConfigurationError("config experiment disagrees with the subcommand")
    data["experiment"] = args.experiment
    for key in _FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.grids:
        try:
            data["grids"] = [int(g) for g in args.grids.split(",")]
        except ValueError as exc:
            raise ConfigurationError("--grids takes comma separated integers") from exc
    label = args.manifold or data.get("manifold")
    dim = args.dim if args.dim is not None else data.get("dim")
    if label is not None:
        spec = parse_manifold(label, dim)
        data["manifold"], data["dim"] = spec.name, spec.d
    elif dim is not None:
        data["dim"] = dim
    try:
        return ExperimentConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigurationError as exc:
        parser.print_usage(sys.stderr)
        print(f"pathflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = None
    code = EXIT_OK
    try:
        report = run_experiment(cfg)
    except ConfigurationError as exc:
        print(f"pathflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, IntegrationError) as exc:
        print(f"pathflow: solver failure: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
        report = getattr(exc, "report", None)
    if report is None:
        from .reports import Report

        report = Report(cfg.experiment, ["name", "pass"], config=cfg.as_dict(), complete=False)
    if code == EXIT_OK and not report.passed:
        code = EXIT_FAILED
    if args.out:
        report.write(args.out)
    else:
        sys.stdout.write(report.csv_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
