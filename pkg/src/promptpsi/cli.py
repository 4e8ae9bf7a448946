"""``promptpsi`` command line: gen-data, train, train-baseline, adapt, eval.

Exit codes: 0 success, 2 usage error, 3 missing inputs, 4 numeric failure.
"""
import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .evaluation import FORMATS, MissingData, SplitOverlap
from .prompts import TaskDescriptor
from .training import NumericError

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", metavar="PATH", help="key=value config file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--home", metavar="DIR",
                   help=f"artifact directory (default ${pipeline.HOME_ENV} or ./{pipeline.DEFAULT_HOME})")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser():
    parser = argparse.ArgumentParser(prog="promptpsi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate one dataset per grid task plus a manifest")
    _common(p)
    p.add_argument("--workers", type=int, default=1, help="parallel sample generation (same output)")

    for name, helptext in (("train", "joint base training then episodic prompt refinement"),
                           ("train-baseline", "train the single-configuration baseline")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--stop-after", type=int, metavar="N",
                       help="stop after N epochs, leaving a checkpoint to resume from")

    p = sub.add_parser("adapt", help="few-shot prompt adaptation to an off-grid task")
    _common(p)
    p.add_argument("--task", metavar="CR,SNR,CHANNEL", help="off-grid task, e.g. 0.25,12,NLoS")
    p.add_argument("--support-size", type=int, metavar="K", help="support samples (default from config)")

    p = sub.add_parser("eval", help="NMSE grid and prompt-matching report")
    _common(p)
    p.add_argument("--models", default="prompt,baseline",
                   help="comma-separated model names under models/ or .psic paths")
    p.add_argument("--out", metavar="PATH", help="report path (default reports/report.<format>)")
    p.add_argument("--grid", choices=("full", "fig4a", "fig4b"), default="full")
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--allow-partial", action="store_true", help="skip grid cells without test data")
    return parser


def run(args):
    cfg = load_config(args.config, args.seed)
    paths = pipeline.Paths(args.home)
    if args.command == "gen-data":
        if args.workers < 1:
            raise pipeline.UsageError("--workers must be at least 1")
        pipeline.gen_data(cfg, paths, force=args.force, workers=args.workers)
    elif args.command == "train":
        pipeline.train(cfg, paths, force=args.force, stop_after=args.stop_after)
    elif args.command == "train-baseline":
        pipeline.train_baseline_cmd(cfg, paths, force=args.force, stop_after=args.stop_after)
    elif args.command == "adapt":
        task = None
        if args.task is not None:
            try:
                task = TaskDescriptor.parse(args.task)
            except ValueError as exc:
                raise pipeline.UsageError(f"--task: {exc}") from None
        rep = pipeline.adapt(cfg, paths, task=task, support_size=args.support_size, force=args.force)
        print(f"{rep['task']}: pre {rep['pre_nmse_db']:.3f} dB -> post {rep['post_nmse_db']:.3f} dB")
    elif args.command == "eval":
        models = [m.strip() for m in args.models.split(",") if m.strip()]
        if not models:
            raise pipeline.UsageError("--models needs at least one model")
        _, out = pipeline.evaluate(cfg, paths, models, args.grid, args.out, args.format, args.allow_partial)
        print(out)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return run(args)
    except (ConfigError, pipeline.UsageError, SplitOverlap) as exc:
        parser.exit(EXIT_USAGE, f"promptpsi: error: {exc}\n")
    except (pipeline.MissingInputs, MissingData) as exc:
        print(f"promptpsi: missing inputs: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"promptpsi: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
