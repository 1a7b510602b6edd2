"""``spell-lab`` command line."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import SCENARIOS, ConfigError, ExperimentConfig, load_config, load_scenario
from .guidance import ConvergenceError
from .sampler import NumericalError

OUT_ENV = "SPELL_LAB_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("spell_lab")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="experiment YAML file")
    src.add_argument("--scenario", choices=SCENARIOS, help="bundled scenario")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spell-lab", description="Sparse repellency experiments on Gaussian mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="run one experiment and write its artifacts")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="run every point of the config's sweep axes")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="per-trajectory diff of a baseline run and a SPELL run")
    p.add_argument("baseline", type=Path)
    p.add_argument("spell", type=Path)
    p.add_argument("--out", type=Path, help="write compare.csv here (directory)")

    p = sub.add_parser("emit-plots", help="export sparsity and Pareto CSVs from run directories")
    p.add_argument("runs", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("build-index", help="build an IVF index over the config's shield centers")
    _add_config_flags(p)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else load_scenario(args.scenario)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be >= 0", "seed")
        cfg.seed = args.seed
    return cfg


def output_dir(cfg: ExperimentConfig, flag) -> Path:
    """--out, then $SPELL_LAB_OUT/<name>, then the config's output key, then ./runs/<name>."""
    if flag is not None:
        return Path(flag)
    root = os.environ.get(OUT_ENV)
    if root:
        return Path(root) / cfg.name
    if cfg.output:
        return Path(cfg.output)
    return Path("runs") / cfg.name


def _run(args) -> int:
    if args.verb == "generate":
        cfg = _load(args)
        out = output_dir(cfg, args.out)
        res = harness.run_experiment(cfg, out)
        print(f"{out}: {res.metadata['n_samples']} samples, {res.metadata['violations']} violations")
    elif args.verb == "sweep":
        cfg = _load(args)
        out = output_dir(cfg, args.out)
        res = harness.run_sweep(cfg, out)
        print(f"{out}: {len(res.rows)} sweep points")
    elif args.verb == "compare":
        out = args.out / "compare.csv" if args.out else None
        rows = harness.compare_runs(args.baseline, args.spell, out)
        changed = sum(r["changed"] for r in rows)
        print(f"{changed} of {len(rows)} trajectories changed")
    elif args.verb == "emit-plots":
        files = harness.emit_plot_data(args.runs, args.out, args.bins)
        print(f"wrote {len(files)} files to {args.out}")
    elif args.verb == "build-index":
        cfg = _load(args)
        out = output_dir(cfg, args.out)
        path = out if out.suffix == ".ivf" else out / "index.ivf"
        index = harness.build_index_file(cfg, path)
        print(f"{path}: {len(index)} centers in {index.n_cells} cells")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, harness.IncompatibleRunsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
