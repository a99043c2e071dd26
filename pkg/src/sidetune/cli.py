"""Command line: ``sidetune {train,eval,sweep,predict,profile}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or
training error. Failures print one line, ``error: <ErrorClass>: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import pipeline, reporting
from .config import load_config
from .errors import InvalidConfig, SideTuneError

log = logging.getLogger("sidetune")


def _common(p):
    p.add_argument("--config", help="run configuration (.cfg or a previous manifest.json)")
    p.add_argument("--seed", type=int, help="override training seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ocr-engine", help="OCR executable (tesseract-compatible CLI)")
    p.add_argument("--threads", type=int, help="torch and OCR thread count")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sidetune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a run configuration")
    _common(p)
    p.add_argument("--schedule", choices=["printed", "inverted"])

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("sweep", help="alpha x head-variant x backbone sweep")
    _common(p)
    p.add_argument("--grid", help="file with one alpha configuration per line (default: built-in 12)")
    p.add_argument("--jobs", type=int, help="parallel jobs (default from config)")

    for name, helptext in (("predict", "classify one document"), ("profile", "time single-document inference")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("image")
        p.add_argument("--text-file", help="use this OCR text instead of running the engine")
        p.add_argument("--runs", type=int, default=1 if name == "predict" else 5)
    return parser


def _run_config(args):
    if not args.config:
        raise InvalidConfig("--config is required")
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if args.ocr_engine:
        changes["ocr_engine"] = args.ocr_engine
    if args.threads:
        changes["threads"] = args.threads
    if getattr(args, "schedule", None):
        changes["schedule"] = args.schedule
    return cfg.replace(**changes).validate()


def cmd_train(args):
    cfg = _run_config(args)
    res = pipeline.run_training(cfg)
    print(f"checkpoint: {res['checkpoint']}")
    if "report" in res:
        print(reporting.format_eval_text(res["report"], cfg.model), end="")
    return 0


def cmd_eval(args):
    override = _run_config(args) if args.config else None
    out = args.out or (override.out_dir if override else None)
    _, paths = pipeline.run_eval(args.checkpoint, args.split, override, out,
                                 figures=not args.no_figures)
    print(Path(paths["txt"]).read_text(encoding="utf-8"), end="")
    print(f"report: {paths['tsv']}")
    return 0


def cmd_sweep(args):
    cfg = _run_config(args)
    grid = pipeline.load_grid(args.grid)
    rows, paths = pipeline.run_sweep(cfg, grid, args.jobs)
    header, table = reporting.sweep_rows(rows)
    print("\t".join(header))
    for r in table:
        print("\t".join(r))
    print(f"table: {paths['tsv']}")
    return 0


def _infer(args, write_report):
    breakdown, scores, class_names = pipeline.run_profile(
        args.checkpoint, args.image, args.text_file, args.runs, args.ocr_engine, args.threads)
    pred = int(torch.argmax(scores))
    print(f"label: {class_names[pred]}")
    print("scores: " + " ".join(f"{c}={float(s):.6g}" for c, s in zip(class_names, scores)))
    for k, v in breakdown.to_dict().items():
        print(f"{k}: {v}" if k == "runs" else f"{k}: {v:.3f}")
    if write_report:
        out = Path(args.out or Path(args.checkpoint).parent)
        paths = reporting.write_timing(breakdown, out)
        print(f"report: {paths['tsv']}")
    return 0


def cmd_predict(args):
    return _infer(args, write_report=bool(args.out))


def cmd_profile(args):
    return _infer(args, write_report=True)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "predict": cmd_predict, "profile": cmd_profile}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except SideTuneError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
