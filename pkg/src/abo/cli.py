"""Command line entry point: ``abo run``, ``abo summarize``, ``abo verify``.

Exit codes: 0 success, 1 failed verification or skipped histories,
2 config parse error (or missing manifest), 3 config validation error,
4 NaN abort during a run (partial outputs flagged in the manifest),
5 refused to overwrite existing outputs without ``--force``.
"""

from __future__ import annotations

import argparse
import logging
import sys

from abo import experiment, verification
from abo.experiment import (
    EXIT_FAILED,
    EXIT_INVALID,
    EXIT_OK,
    EXIT_PARSE,
)


def _cmd_run(args) -> int:
    try:
        config = experiment.load_config(args.config)
    except experiment.ConfigParseError as exc:
        print(f"error: cannot parse config: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except experiment.ConfigValidationError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    outcome = experiment.run_experiment(config, force=args.force, jobs=args.jobs)
    if outcome.message:
        print(outcome.message, file=sys.stderr)
    for path in outcome.written:
        print(f"wrote {path}")
    return outcome.code


def _cmd_summarize(args) -> int:
    try:
        table = experiment.summarize(args.dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(experiment.format_table(table))
    for name, reason in table.skipped:
        print(f"skipped {name}: {reason}", file=sys.stderr)
    return EXIT_FAILED if table.skipped else EXIT_OK


def _cmd_verify(args) -> int:
    names = [args.suite] if args.suite != "all" else list(verification.SUITES)
    ok = True
    for name in names:
        result = verification.SUITES[name]()
        for label, passed, detail in result.checks:
            print(f"[{'PASS' if passed else 'FAIL'}] {name}: {label} ({detail})")
        print(f"{name}: {'passed' if result.passed else 'FAILED'} in {result.seconds:.2f} s")
        ok &= result.passed
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abo", description="Similarity-score Bayesian optimization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every method x seed in a config")
    run.add_argument("--config", required=True)
    run.add_argument("--force", action="store_true", help="overwrite existing outputs")
    run.add_argument("--jobs", type=int, default=1, help="worker processes")
    run.set_defaults(func=_cmd_run)

    summ = sub.add_parser("summarize", help="write summary.csv and curves.csv")
    summ.add_argument("--dir", required=True)
    summ.set_defaults(func=_cmd_summarize)

    ver = sub.add_parser("verify", help="run the numerical self-checks")
    ver.add_argument("--suite", required=True, choices=[*verification.SUITES, "all"])
    ver.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
