"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 tolerance breach.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .harness import ConfigError, ExperimentConfig, ToleranceBreach
from .saddle import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 1, 2, 3

COMMANDS = ("bench-assets", "grad-check", "optimize", "critic", "eval-risk")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cohrisk", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="overrides sgd.seed")
        p.add_argument("--out", type=Path, help="output file (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default=None)
    return ap


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o)) + "\n"


def _load(args) -> ExperimentConfig:
    if args.config is None:
        if args.command == "bench-assets":
            return ExperimentConfig()
        raise ConfigError(f"{args.command} needs --config")
    return ExperimentConfig.load(args.config)


def run(args) -> int:
    cfg = _load(args)
    out = args.out or (Path(cfg.output) if cfg.output else None)
    if args.command == "bench-assets":
        trace, rows = harness.cmd_bench_assets(cfg, args.seed)
        fmt = args.format or "csv"
        text = (harness.rows_to_csv if fmt == "csv" else harness.rows_to_json)(harness.BENCH_HEADER, rows)
        _emit(text, out)
        return EXIT_NUMERIC if trace.aborted else EXIT_OK
    if args.command == "optimize":
        trace = harness.run_optimize(cfg, args.seed)
        rows = list(trace.rows())
        fmt = args.format or "csv"
        text = (harness.rows_to_csv if fmt == "csv" else harness.rows_to_json)(trace.header(), rows)
        _emit(text, out)
        final = {"theta": trace.theta.tolist(), "iters": len(trace) - 1, "aborted": trace.aborted}
        if out is not None:
            out.with_suffix(".theta.json").write_text(_json(final))
        else:
            sys.stderr.write(_json(final))
        return EXIT_NUMERIC if trace.aborted else EXIT_OK
    fn = {"grad-check": harness.cmd_grad_check, "critic": harness.cmd_critic,
          "eval-risk": harness.cmd_eval_risk}[args.command]
    try:
        report = fn(cfg, args.seed)
    except ToleranceBreach as e:
        _emit(_json(e.report), out)
        return EXIT_TOLERANCE
    _emit(_json(report), out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
