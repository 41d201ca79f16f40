"""Command-line entry point: ``adarand {pretrain,finetune,sweep,diag}``.

Failures exit nonzero and print one JSON error record to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from adarand import diagnostics, model
from adarand.harness.config import load_config
from adarand.harness.data import load_csv_dataset
from adarand.harness.sweep import parse_values, sweep
from adarand.harness.train import run_finetune, run_pretrain, write_json

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _cmd_pretrain(args) -> dict:
    cfg = load_config(args.config)
    path = run_pretrain(cfg, args.out)
    return {"checkpoint": str(path)}


def _cmd_finetune(args) -> dict:
    cfg = load_config(args.config)
    result = run_finetune(cfg, args.pretrained, args.out)
    s = result.summary
    return {"out": str(args.out), "best_epoch": s["best_epoch"], "test_acc": s["test_acc"]}


def _cmd_sweep(args) -> dict:
    cfg = load_config(args.config)
    values = parse_values(args.axis, args.values)
    rows = sweep(cfg, args.axis, values, args.seeds, args.out, workers=args.workers)
    return {"summary": str(Path(args.out) / "summary.csv"), "cells": len(rows),
            "failed": sum(r["n_failed"] for r in rows)}


def _cmd_diag(args) -> dict:
    extractor, head, _ = model.load_model(args.checkpoint)
    data = load_csv_dataset(args.data)
    feats = model.extract_features(extractor, data.x)
    report = diagnostics.diagnose(feats, data.y, data.num_classes, head, args.n_cap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report.as_dict(), out / "diagnostics.json")
    proj, _ = diagnostics.pca2(feats)
    diagnostics.write_pca_csv(out / "pca.csv", proj, data.y)
    return {"out": str(out), "n": int(data.y.size)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adarand", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train an extractor on the source task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a pretrained extractor on the target task")
    p.add_argument("--config", required=True)
    p.add_argument("--pretrained", required=True, help="checkpoint written by `pretrain`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("sweep", help="fine-tune over one axis and seed replicates")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["lambda", "alpha", "fraction", "kind"])
    p.add_argument("--values", required=True, help="comma-separated, e.g. 0.1,0.25,0.5,1.0")
    p.add_argument("--seeds", type=int, default=1, help="number of seed replicates")
    p.add_argument("--workers", type=int, default=1, help="parallel processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("diag", help="feature diagnostics and PCA export for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV with header f0,...,f{m-1},label")
    p.add_argument("--n-cap", type=int, default=diagnostics.N_CAP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        result = args.func(args)
    except Exception as exc:
        record = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
