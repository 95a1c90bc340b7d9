"""``vcd`` command line with one subcommand per workflow step."""
from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from .experiment import OUTPUT_ROOT_ENV, contours_run, evaluate_run, run_experiment
from .optimize import TrainingAborted

logger = logging.getLogger("vcd")

EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _common(p):
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="record a thread budget (computation is single-threaded)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="zero wall-clock columns so identical runs give identical bytes")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vcd", description=f"Variational contrastive divergence experiments. "
                                f"${OUTPUT_ROOT_ENV} re-roots every output directory.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train (and for lvm, evaluate) from a config file")
    run.add_argument("config")
    run.add_argument("--output-dir", help="override output_dir from the config")
    _common(run)
    ev = sub.add_parser("eval", help="re-evaluate a finished run")
    ev.add_argument("run_dir")
    ev.add_argument("dataset", nargs="?", help="'synthetic' or an IDX path; defaults to the run's dataset")
    _common(ev)
    co = sub.add_parser("contours", help="re-emit contour grids of a finished toy run")
    co.add_argument("run_dir")
    _common(co)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            overrides = {k: v for k, v in (("seed", args.seed), ("threads", args.threads),
                                           ("deterministic", args.deterministic),
                                           ("output_dir", args.output_dir)) if v is not None}
            out = run_experiment(cfgmod.load(args.config, **overrides))
            print(out)
        elif args.command == "eval":
            print(evaluate_run(args.run_dir, args.dataset))
        else:
            for name in contours_run(args.run_dir):
                print(name)
    except (cfgmod.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"vcd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"vcd: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    return 0


if __name__ == "__main__":
    sys.exit(main())
