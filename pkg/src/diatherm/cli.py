"""Command-line interface: run, sweep, validate-config, replay.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import sys

from .errors import ConfigError, SimulationError
from .harness import (
    load_config,
    load_grid,
    render_config,
    replay,
    run_experiment,
    run_sweep,
    validate_config,
)


def _add_config_args(parser):
    parser.add_argument("--config", required=True, help="key-value config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override a config key (repeatable)",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Diabatic ramps of a trapped-ion Ising chain vs thermal ensembles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run one experiment")
    _add_config_args(run_parser)
    run_parser.add_argument("--out", required=True, help="output bundle directory")

    sweep_parser = sub.add_parser("sweep", help="run a grid of experiments")
    _add_config_args(sweep_parser)
    sweep_parser.add_argument("--grid", required=True, help="grid file")
    sweep_parser.add_argument("--out", required=True, help="sweep output directory")
    sweep_parser.add_argument(
        "--workers", type=int, default=None,
        help="worker processes (default: SIMULATE_WORKERS or all cores)",
    )

    validate_parser = sub.add_parser("validate-config", help="check and print a config")
    _add_config_args(validate_parser)

    replay_parser = sub.add_parser(
        "replay", help="recompute observables from a stored bundle"
    )
    replay_parser.add_argument("--bundle", required=True, help="bundle directory")
    replay_parser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = validate_config(load_config(args.config, args.overrides))
            bundle = run_experiment(config, out_dir=args.out)
            print(f"wrote bundle {args.out} (config {bundle.config_hash})")
        elif args.command == "sweep":
            config = validate_config(load_config(args.config, args.overrides))
            grid = load_grid(args.grid)
            results = run_sweep(config, grid, args.out, workers=args.workers)
            failed = [r for r in results if not r.ok]
            print(f"sweep complete: {len(results) - len(failed)} ok, {len(failed)} failed")
            if failed:
                for r in failed:
                    print(f"  FAILED {r.tag}: {r.error}", file=sys.stderr)
                return 3
        elif args.command == "validate-config":
            config = validate_config(load_config(args.config, args.overrides))
            sys.stdout.write(render_config(config))
        elif args.command == "replay":
            bundle = replay(args.bundle, args.out)
            print(f"replayed bundle into {args.out} (config {bundle.config_hash})")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
