"""Command-line entry point: ``geossl <subcommand> [options]``.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 data error, 4 training abort.
"""

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, GeosslError
from .experiment import (evaluate_checkpoint, expand_sweep, load_config, load_data, pretext_sources,
                         run_experiment, run_sweep)

log = logging.getLogger("geossl")


def _common(p, config_required=True):
    p.add_argument("--config", type=Path, required=config_required, help="experiment YAML/JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--include-test-split", action="store_true", default=None,
                   help="also feed the test images to the pretext task")
    p.add_argument("--device", help="torch device (default: $GEOSSL_DEVICE or cpu)")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="geossl", description="Geometric-transform self-supervised learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="export a pretext dataset as PNG files plus manifest.csv")
    _common(p)
    p.add_argument("--limit", type=int, help="export at most this many samples")
    p.add_argument("--count-only", action="store_true", help="print sample and label counts, write nothing")

    p = sub.add_parser("train-pretext", help="train the pretext model of one experiment")
    _common(p)

    p = sub.add_parser("eval-downstream", help="run the downstream evaluations of one experiment")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="evaluate this checkpoint instead of the experiment's own")

    p = sub.add_parser("sweep", help="run every experiment of a sweep config")
    _common(p)
    p.add_argument("--workers", type=int, default=1, help="parallel experiments")

    p = sub.add_parser("report", help="result tables and accuracy curves")
    p.add_argument("results", type=Path, help="directory searched for result.json files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-curves", action="store_true")

    sub.add_parser("verify", help="run the built-in invariant checks")

    p = sub.add_parser("make-surrogate", help="write a procedural dataset in CIFAR-10 binary format")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int, default=50_000)
    p.add_argument("--n-test", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args):
    overrides = {"seed": args.seed, "include_test_split": args.include_test_split, "device": args.device}
    return load_config(args.config, overrides)


def _single(config):
    if config.is_sweep:
        raise ConfigurationError("config contains sweep lists; use the 'sweep' subcommand")
    return config


def cmd_generate(args):
    from .dataset import build_pretext_random, build_pretext_separate, export_pretext
    from .geometry import make_transform_set

    config = _single(_config(args))
    train, test = load_data(config)
    tset = make_transform_set(config.transform_set)
    sources = pretext_sources(config, train, test)
    if config.method == "separate":
        ds = build_pretext_separate(sources, tset)
    else:
        ds = build_pretext_random(sources, tset, config.copies or tset.K, config.seed)
    counts = ds.label_counts().tolist()
    print(f"{config.transform_set}: {len(ds)} samples from {ds.n_sources} images, label counts {counts}")
    if not args.count_only:
        manifest = export_pretext(ds, args.out, limit=args.limit)
        print(f"wrote {manifest}")


def cmd_train_pretext(args):
    config = _single(_config(args))
    run = run_experiment(config, args.out, stages=("pretext",))
    state = "trained" if run.pretext_trained else "already complete"
    print(f"pretext {state}: {run.run_dir / 'pretext' / 'checkpoint.tssl'}")


def cmd_eval_downstream(args):
    config = _single(_config(args))
    if args.checkpoint is not None:
        run = evaluate_checkpoint(config, args.checkpoint, args.out)
    else:
        run = run_experiment(config, args.out)
    _print_results(run)


def _print_results(run):
    from .downstream import RunResult

    for path in run.result_paths:
        res = RunResult.read(path)
        print(f"{path.parent.relative_to(run.run_dir)}: test accuracy {res.final_test_acc:.4f}")


def cmd_sweep(args):
    config = _config(args)
    n = len(expand_sweep(config))
    print(f"{n} experiment(s) into {args.out}")
    for run in run_sweep(config, args.out, workers=args.workers):
        _print_results(run)


def cmd_report(args):
    from .report import emit_curves, emit_table

    report = emit_table(args.results, args.out)
    print(report.markdown)
    if not args.no_curves:
        figures = emit_curves(args.results, args.out)
        print(f"{len(figures)} figure(s) written to {args.out}")


def cmd_verify(args):
    from .verify import run_checks

    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail} ({r.seconds:.2f}s)")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_make_surrogate(args):
    from .synthetic import write_surrogate_cifar

    path = write_surrogate_cifar(args.out, n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    print(f"surrogate CIFAR-format data in {path}")


COMMANDS = {
    "generate": cmd_generate,
    "train-pretext": cmd_train_pretext,
    "eval-downstream": cmd_eval_downstream,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "verify": cmd_verify,
    "make-surrogate": cmd_make_surrogate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except GeosslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
