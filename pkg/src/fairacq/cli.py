"""Command-line entry point: ``fairacq <stage> --config exp.yaml``.

Stages run in order ``ingest -> pretrain -> train -> evaluate -> report``;
``run-all`` chains them. On failure a JSON summary goes to stderr and the
exit code is nonzero (2: invalid config, 3: some cells failed, 1: other).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import ConfigError, validate_config
from .data import DataError
from .runner import Experiment, ExperimentFailed, StaleOutputError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CELLS = 3

STAGES = ("ingest", "pretrain", "train", "evaluate", "report", "run-all")


def build_parser():
    parser = argparse.ArgumentParser(prog="fairacq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--workers", type=int, help="concurrent cells (default from config)")
        p.add_argument("--resume", action="store_true",
                       help="skip outputs this stage already finished")
        p.add_argument("--plot", action="store_true", help="also write tradeoff.png (report, run-all)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code, kind, message, details=None):
    payload = {"status": "error", "error": kind, "message": message}
    if details is not None:
        payload["details"] = details
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def load_config(args):
    cfg = validate_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(["--workers: must be at least 1"])
        overrides["workers"] = args.workers
    return dataclasses.replace(cfg, **overrides)


def run_stage(stage, exp, workers, plot):
    """Run one stage; returns a JSON-able summary."""
    if stage == "ingest":
        datasets = exp.ingest()
        return {"folds": list(exp.cfg.folds), "n_instances": exp.n_instances(),
                "n_features": datasets[0].n_features, "n_groups": datasets[0].n_groups}
    if stage == "pretrain":
        exp.ingest()
        exp.run_pretrain(redo=not exp.resume)
        return {"pretrained_folds": list(exp.cfg.folds)}
    if stage in ("train", "evaluate"):
        exp.ingest()
        _, failures = exp.run_cells(workers, stage=stage, train_missing=False)
        if failures:
            raise ExperimentFailed(failures, [])
        return {"cells": len(exp.cells())}
    if stage == "report":
        rows = exp.report(plot=plot)
        return {"rows": len(rows), "report": str(exp.root / "report.csv")}
    # run-all
    exp.ingest()
    if not exp.resume:
        exp.run_pretrain(redo=True)
    _, failures = exp.run_cells(workers)
    rows = exp.report(plot=plot)
    if failures:
        raise ExperimentFailed(failures, rows)
    return {"rows": len(rows), "report": str(exp.root / "report.csv")}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "ConfigError", "invalid configuration", exc.errors)
    exp = Experiment(cfg, resume=args.resume)
    try:
        exp.claim_output()
        summary = run_stage(args.stage, exp, cfg.workers, args.plot)
    except ExperimentFailed as exc:
        return _fail(EXIT_CELLS, "ExperimentFailed", str(exc), exc.failures)
    except (DataError, StaleOutputError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))
    print(json.dumps({"status": "ok", "stage": args.stage, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
