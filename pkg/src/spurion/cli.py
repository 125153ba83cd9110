"""Command-line entry point: ``spurion run|grid|report``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .colored_mdp import read_config
from .harness import (DEFAULT_GRIDS, METHODS, grid_search, paper_table_specs, run_experiment,
                      spec_from_options, write_paper_tables)

log = logging.getLogger("spurion")


def _spec(args):
    options = read_config(args.config) if args.config else {}
    spec = spec_from_options(args.method, options)
    if args.mnist_dir:
        spec = replace(spec, digits=str(args.mnist_dir))
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    return spec


def _parse_grid(text):
    """``lr=1e-3,1e-4;l1=1e-2`` -> ``{"lr": (1e-3, 1e-4), "l1": (1e-2,)}``."""
    grid = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        name, values = part.split("=", 1)
        grid[name.strip()] = tuple(float(v) for v in values.split(","))
    return grid


def _add_common(p):
    p.add_argument("method", choices=METHODS)
    p.add_argument("--config", type=Path, help="key=value configuration file")
    digits = p.add_mutually_exclusive_group()
    digits.add_argument("--mnist-dir", type=Path, help="directory with MNIST IDX files")
    digits.add_argument("--synthetic", action="store_true",
                        help="use generated digits for image mode (default)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel seeds")


def build_parser():
    parser = argparse.ArgumentParser(prog="spurion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    _add_common(run)

    grid = sub.add_parser("grid", help="hyperparameter grid search")
    _add_common(grid)
    grid.add_argument("--grid", help="axes as 'lr=1e-3,1e-4;l1=1e-2' (default: method's grid)")
    grid.add_argument("--min-seen", type=float, default=None,
                      help="rank cells below this seen accuracy last")

    report = sub.add_parser("report", help="regenerate table-shaped CSVs")
    report.add_argument("--paper-tables", type=Path, required=True, metavar="DIR")
    report.add_argument("--seeds", type=int, default=None, help="seeds per row (default per method)")
    report.add_argument("--train-steps", type=int, default=None)
    report.add_argument("--pwb-iterations", type=int, default=None)
    report.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            rep = run_experiment(_spec(args), out_dir=args.out, workers=args.workers)
            print(f"{args.method}: seen {rep.seen_acc:.4f} +- {rep.seen_std:.4f}  "
                  f"unseen {rep.unseen_acc:.4f} +- {rep.unseen_std:.4f}")
        elif args.command == "grid":
            grid = _parse_grid(args.grid) if args.grid else DEFAULT_GRIDS[args.method]
            best, rows = grid_search(_spec(args), grid, out_dir=args.out, workers=args.workers,
                                     min_seen=args.min_seen)
            print(f"{args.method}: {len(rows)} cells; best seen {best.seen_acc:.4f} "
                  f"unseen {best.unseen_acc:.4f}")
        else:
            seeds = range(args.seeds) if args.seeds else None
            specs = paper_table_specs(seeds, args.train_steps, args.pwb_iterations)
            reports = {key: run_experiment(spec, workers=args.workers) for key, spec in specs.items()}
            write_paper_tables(args.paper_tables, reports)
            print(f"wrote tables to {args.paper_tables}")
    except (ValueError, OSError, FloatingPointError, LookupError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
