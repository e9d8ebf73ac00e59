"""Command line entry point: ``davt run | calibrate | report | selfcheck``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="davt", description="Deep anytime-valid hypothesis tests.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, default=Path("results"))
    run.add_argument("--emit-diagnostics", action="store_true", help="add score and growth columns to the CSV")
    run.add_argument("--workers", type=int, default=None, help="parallel trial workers (overrides the config)")

    cal = sub.add_parser("calibrate", help="run a config with its generator forced to the null")
    cal.add_argument("--config", required=True, type=Path)
    cal.add_argument("--trials", required=True, type=int)
    cal.add_argument("--out", type=Path, default=None)
    cal.add_argument("--workers", type=int, default=None)

    rep = sub.add_parser("report", help="tabulate one or more summary.json files")
    rep.add_argument("summaries", nargs="+", type=Path)
    rep.add_argument("--out", type=Path, default=None, help="directory for rejection_rates.csv and stopping_times.csv")

    sub.add_parser("selfcheck", help="run the fast invariant checks")
    return p


def _run(args) -> int:
    from .harness import describe, parse_config, run_trials

    cfg = parse_config(args.config)
    summary = run_trials(cfg, args.out, workers=args.workers, emit_diagnostics=args.emit_diagnostics)
    print(describe(summary))
    print(f"wrote {args.out}/trajectories.csv, summary.json, manifest.json (digest {summary.config_digest[:12]})")
    return EXIT_OK


def _calibrate(args) -> int:
    from .harness import binomial_envelope, describe, null_version, parse_config, run_trials

    if args.trials < 1:
        raise ConfigError("--trials must be positive")
    cfg = null_version(parse_config(args.config)).replace(trials=args.trials)
    summary = run_trials(cfg, args.out, workers=args.workers)
    limit = binomial_envelope(cfg.trials, cfg.test.alpha)
    print(describe(summary))
    verdict = "within" if summary.rejections <= limit else "OUTSIDE"
    print(f"null rejections {summary.rejections}/{cfg.trials}; envelope {limit} at alpha={cfg.test.alpha}: {verdict}")
    return EXIT_OK


def _report(args) -> int:
    from .harness import report

    rates, quantiles = report(args.summaries)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "rejection_rates.csv").write_text(rates)
        (args.out / "stopping_times.csv").write_text(quantiles)
    print(rates, end="")
    print()
    print(quantiles, end="")
    return EXIT_OK


def _selfcheck(args) -> int:
    from .checks import run_checks

    failed = 0
    for name, ok, detail in run_checks():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


COMMANDS = {"run": _run, "calibrate": _calibrate, "report": _report, "selfcheck": _selfcheck}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
