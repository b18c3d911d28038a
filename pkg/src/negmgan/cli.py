"""Command-line entry point: ``negmgan {synth,train,detect,eval,sweep}``.

Every subcommand reads an optional ``key = value`` config file, applies
``--set key=value`` overrides, and echoes the effective configuration to
standard error before doing any work.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bigan import CheckpointError
from .data import DataError
from .pipeline import (
    ConfigError,
    DetectionReport,
    EvalMismatch,
    GroundTruth,
    StageError,
    cmd_detect,
    cmd_eval,
    cmd_synth,
    cmd_train,
    format_config,
    ground_truth,
    load_config,
    load_dataset,
)
from .sweep import run_uc_sweep, run_ws_study, write_sweep

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_CHECKPOINT, EXIT_EVAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _int_range(text):
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",")]


def build_parser():
    parser = _Parser(prog="negmgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--quiet", action="store_true", help="do not echo the effective config")
        return p

    p = common(sub.add_parser("synth", help="generate the synthetic dataset"))
    p.add_argument("--out", help="dataset file (default: <output_dir>/synthetic.negm)")
    common(sub.add_parser("train", help="train the model and write a checkpoint"))
    p = common(sub.add_parser("detect", help="stream the test split through a checkpoint"))
    p.add_argument("--checkpoint", help="checkpoint file (default: <output_dir>/model.ckpt)")
    p = common(sub.add_parser("eval", help="score a detection report"))
    p.add_argument("--report", help="report file (default: <output_dir>/report.jsonl)")
    p.add_argument("--truth", help="ground-truth JSON (default: rebuilt from the config)")
    p.add_argument("--baseline-rmse", type=float, help="baseline RMSE for S-R2")
    p.add_argument("--out", help="metrics file (default: <output_dir>/metrics.json)")
    p = common(sub.add_parser("sweep", help="vary the number of unknown classes"))
    p.add_argument("--counts", default="2-6", type=_int_range, help="e.g. 2-6 or 2,4")
    p.add_argument("--combinations", type=int, default=10, help="combinations per count")
    p.add_argument("--seeds", default="0", type=_int_range, help="e.g. 0-4")
    p.add_argument("--ws-study", metavar="WS_LIST", type=_int_range,
                   help="instead vary the warm-up size, e.g. 25,50,100,200,400")
    return parser


def run(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, _overrides(args.set))
    except (UsageError, ConfigError, OSError) as exc:
        print(f"negmgan: error: {exc}", file=stderr)
        return EXIT_USAGE
    if not args.quiet:
        stderr.write("# effective configuration\n" + format_config(cfg))
    try:
        if args.command == "synth":
            print(cmd_synth(cfg, args.out), file=stdout)
        elif args.command == "train":
            res = cmd_train(cfg)
            print(res.checkpoint, file=stdout)
        elif args.command == "detect":
            report = cmd_detect(cfg, args.checkpoint)
            print(json.dumps({"k0": report.k0, "k_new": report.k_new,
                              "batches": len(report.records)}), file=stdout)
        elif args.command == "eval":
            report = DetectionReport.read(args.report or cfg.out / "report.jsonl")
            truth = GroundTruth.read(args.truth) if args.truth else ground_truth(cfg)
            out = Path(args.out) if args.out else cfg.out / "metrics.json"
            out.parent.mkdir(parents=True, exist_ok=True)
            metrics = cmd_eval(report, truth, args.baseline_rmse, out)
            print(json.dumps(metrics, sort_keys=True), file=stdout)
        elif args.command == "sweep":
            fm = load_dataset(cfg)
            log = lambda r: print(json.dumps({"count": r.count, "k_pred": r.k_pred, "ws": r.ws,
                                              "error": r.error}), file=stderr)
            if args.ws_study:
                rows = run_ws_study(fm, cfg, args.ws_study, seeds=args.seeds, progress=log)
            else:
                rows = run_uc_sweep(fm, cfg, args.counts, args.combinations, args.seeds,
                                    progress=log)
            for path in write_sweep(rows, cfg.out):
                print(path, file=stdout)
    except StageError as exc:
        print(f"negmgan: {exc}", file=stderr)
        return EXIT_TRAIN
    except CheckpointError as exc:
        print(f"negmgan: checkpoint: {exc}", file=stderr)
        return EXIT_CHECKPOINT
    except EvalMismatch as exc:
        print(f"negmgan: eval: {exc}", file=stderr)
        return EXIT_EVAL
    except (DataError, ValueError, OSError) as exc:
        print(f"negmgan: error: {exc}", file=stderr)
        return EXIT_USAGE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
