"""Command-line entry point: ``noisylab <subcommand> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detection import DETECTION_CSV_HEADER, find_label_errors, score_detection
from .experiments import (
    ConfigError,
    ExperimentConfig,
    Runner,
    aggregate,
    read_runs_csv,
    read_summary_csv,
    run_duration_sweep,
    run_extended_training,
    run_main_sweep,
    write_runs_csv,
    write_summary_csv,
)
from .plots import accuracy_vs_eta, f1_vs_pretrain_epochs

log = logging.getLogger("noisylab")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    return cfg.validate()


def _finish(cfg: ExperimentConfig, records) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    write_runs_csv(records, out / "runs.csv")
    rows = aggregate(records)
    write_summary_csv(rows, out / "summary.csv")
    _plots(rows, out)
    failed = [r for r in records if not r.ok]
    for r in failed:
        log.error("%s: %s", r.run_id, r.status)
    print(f"{len(records) - len(failed)}/{len(records)} runs ok; results in {out}")
    return 1 if failed else 0


def _plots(rows, out: Path) -> None:
    kinds = {r["experiment"] for r in rows}
    if "main" in kinds:
        accuracy_vs_eta(rows, out / "accuracy_vs_eta.svg")
    if "duration" in kinds:
        f1_vs_pretrain_epochs(rows, out / "f1_vs_pretrain_epochs.svg")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    runner = Runner(cfg)
    epochs = sorted({0, cfg.ssl.epochs, *[m for m in cfg.milestones if m <= cfg.ssl.epochs]})
    for seed in cfg.seeds:
        for method in cfg.methods:
            runner.pretrained(method, seed, epochs)
            for e in epochs:
                print(runner._ckpt_path(method, seed, e))
    runner.write_loss_csv()
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    runner = Runner(cfg)
    ckpt = Path(args.checkpoint).read_bytes() if args.checkpoint else None
    method = args.method or ("pretrained" if ckpt else "baseline")
    records = []
    out = Path(cfg.out_dir)
    for seed in cfg.seeds:
        pred: dict = {}
        rec = runner.fit_and_evaluate("finetune", method, args.eta, 0, seed, cfg.finetune.epochs,
                                      checkpoint=ckpt, predictions=pred)
        records.append(rec)
        if pred:
            out.mkdir(parents=True, exist_ok=True)
            np.savez(out / f"predictions-s{seed}.npz", **pred)
        print(f"{rec.run_id}: accuracy {rec.accuracy:.2f} F1 {rec.f1:.4f} BA {rec.balanced_accuracy:.4f}")
    return _finish(cfg, records)


def cmd_detect(args) -> int:
    with np.load(args.input) as z:
        probs, given = z["probs"], z["given_labels"]
        mask = z["mask"] if "mask" in z.files else None
    flagged = find_label_errors(probs, given)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "flagged.txt", np.flatnonzero(flagged), fmt="%d")
    print(f"flagged {int(flagged.sum())} of {len(flagged)} examples")
    if mask is not None:
        rep = score_detection(flagged, mask)
        with open(out / "detection.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DETECTION_CSV_HEADER)
            w.writerow(rep.csv_row(Path(args.input).stem, float("nan"), "confident_learning"))
        print(f"F1 {rep.f1:.4f} BA {rep.balanced_accuracy:.4f}")
    return 0


def cmd_sweep_main(args) -> int:
    cfg = _config(args)
    return _finish(cfg, run_main_sweep(cfg))


def cmd_sweep_duration(args) -> int:
    cfg = _config(args)
    return _finish(cfg, run_duration_sweep(cfg))


def cmd_extended(args) -> int:
    cfg = _config(args)
    records = run_extended_training(cfg)
    for r in records:
        if r.ok:
            peak = max(r.test_accuracy)
            print(f"{r.run_id}: peak {peak:.2f} final {r.test_accuracy[-1]:.2f} "
                  f"decline {peak - r.test_accuracy[-1]:.2f}")
    return _finish(cfg, records)


def cmd_aggregate(args) -> int:
    records = [r for p in args.runs for r in read_runs_csv(p)]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate(records)
    write_summary_csv(rows, out / "summary.csv")
    for row in rows:
        if row["note"].startswith("warning"):
            log.warning("%s %s eta=%g: %s", row["experiment"], row["method"], row["eta"], row["note"])
    print(f"{len(rows)} conditions written to {out / 'summary.csv'}")
    return 1 if any(not r.ok for r in records) else 0


def cmd_plot(args) -> int:
    rows = read_summary_csv(args.summary)
    out = Path(args.out or Path(args.summary).parent)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for r in rows if not math.isnan(r["accuracy_mean"])]
    _plots(rows, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    p = argparse.ArgumentParser(prog="noisylab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training with checkpoints")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="fine-tune on noisy labels and score detection")
    s.add_argument("--eta", type=float, default=0.0, help="noise rate")
    s.add_argument("--checkpoint", help="encoder checkpoint (default: random init)")
    s.add_argument("--method", help="method label for the run record")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("detect", parents=[common], help="Confident Learning on saved predictions")
    s.add_argument("input", help=".npz with probs, given_labels and optionally mask")
    s.set_defaults(func=cmd_detect)

    for name, func, text in (("sweep-main", cmd_sweep_main, "baseline vs SSL over the noise grid"),
                             ("sweep-duration", cmd_sweep_duration, "fine-tune from each pretrain milestone"),
                             ("extended", cmd_extended, "long fine-tuning, overfitting traces")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--workers", type=int, help="processes for per-seed units")
        s.set_defaults(func=func)

    s = sub.add_parser("aggregate", parents=[common], help="summarize one or more runs.csv files")
    s.add_argument("runs", nargs="+")
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("plot", parents=[common], help="SVG charts from summary.csv")
    s.add_argument("summary")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"noisylab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
