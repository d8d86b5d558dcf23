"""``contextprobe gen|train|audit|report`` command-line entry point.

Success prints a JSON summary on stdout and exits 0. Failures print one JSON
object ``{"error": kind, "message": ..., ["field": ...]}`` on stderr and exit
nonzero (2 for configuration/usage errors, 1 for everything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, load_config
from .formats import FormatError
from .tinymodel import TrainingDivergence


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contextprobe", description="Audit and reduce context dependence of small vision models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate train/test datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True, help="directory written by `gen` (or a single dataset)")
    t.add_argument("--out", required=True, help="run directory for the checkpoint and run record")

    a = sub.add_parser("audit", help="measure context robustness of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--alpha", type=float, default=None, help="IoU change threshold (overrides the config)")
    a.add_argument("--out", default=None, help="report JSON path (default: stdout)")

    r = sub.add_parser("report", help="export a robustness report")
    r.add_argument("report", help="report JSON written by `audit`")
    r.add_argument("--format", required=True, choices=experiment.REPORT_FORMATS)
    r.add_argument("--out", required=True, help="output directory")
    return p


def _run(args) -> dict:
    if args.command == "gen":
        cfg = load_config(args.config)
        out = experiment.cmd_gen(cfg, args.out)
        return {"dataset": str(out), "config_hash": cfg.config_hash}
    if args.command == "train":
        cfg = load_config(args.config)
        rec = experiment.cmd_train(cfg, args.dataset, args.out)
        return {"checkpoint": rec.checkpoint, "config_hash": rec.config_hash,
                "metrics": json.loads(rec.to_json())["metrics"]}
    if args.command == "audit":
        if args.alpha is not None and not args.alpha > 0:
            raise ConfigError("alpha", "must be positive")
        report = experiment.cmd_audit(args.checkpoint, args.dataset, args.alpha, args.out)
        if args.out is None:
            sys.stdout.write(report.to_json())
            return {}
        return {"report": args.out, "summary": report.summary}
    written = experiment.cmd_report(args.report, args.format, args.out)
    return {"files": [str(p) for p in written]}


def _fail(kind: str, message: str, code: int, field: str | None = None) -> int:
    err = {"error": kind, "message": message}
    if field is not None:
        err["field"] = field
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except ConfigError as exc:
        return _fail("config", exc.message, 2, exc.field)
    except experiment.TaskMismatch as exc:
        return _fail("task_mismatch", str(exc), 1)
    except TrainingDivergence as exc:
        return _fail("divergence", str(exc), 1)
    except FormatError as exc:
        return _fail("format", str(exc), 1)
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        return _fail("io", str(exc), 1)
    except (ValueError, KeyError) as exc:
        return _fail("invalid", str(exc), 1)
    if result:
        sys.stdout.write(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
