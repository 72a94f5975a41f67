"""Command-line entry point.

Subcommands: synth-data, pretrain, finetune, probe-gradvar, eval,
data-seen, equal-data, report. Every run writes its resolved config next
to its outputs; a single --seed flag controls all randomness of a run.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .batching import data_seen
from .config import ConfigError, RunConfig, apply_overrides, load_config, save_config
from .dataset import load_manifest, save_manifest, split_validation, synth_corpus


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="w2v2lab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a deterministic synthetic tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-dur", type=float, default=2.0)
    p.add_argument("--max-dur", type=float, default=8.0)
    p.add_argument("--val-fraction", type=float, default=0.05)

    p = sub.add_parser("pretrain", help="self-supervised pretraining run")
    p.add_argument("--config", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("finetune", help="CTC fine-tuning from a checkpoint or from scratch")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True, help="pretraining checkpoint path, or 'scratch'")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("probe-gradvar", help="gradient-variance probe over saved checkpoints")
    p.add_argument("--run-dir", help="probe every step-*.ckpt in this directory")
    p.add_argument("--checkpoint", action="append", default=[], help="probe a specific checkpoint")
    p.add_argument("--manifest", required=True, help="training manifest to draw fresh batches from")
    p.add_argument("--out", required=True)
    p.add_argument("--n-batches", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="greedy-decode a manifest with a fine-tuned model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("data-seen", help="upper-bound data-seen accounting")
    p.add_argument("--batch-seconds", type=float, required=True)
    p.add_argument("--iterations", type=int, required=True)
    p.add_argument("--dataset-hours", type=float, default=912.0)

    p = sub.add_parser("equal-data", help="paired runs holding batch_seconds x iterations fixed")
    p.add_argument("--config", required=True)
    p.add_argument("--pairs", required=True,
                   help="comma list of BATCH_SECONDSxITERATIONS, e.g. '20x1000,40x500'")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("report", help="render figure-ready CSVs and PNGs from a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    return cfg


def _cmd_synth_data(args) -> int:
    out = Path(args.out)
    manifest = synth_corpus(
        seed=args.seed, count=args.count, out_dir=out,
        min_dur=args.min_dur, max_dur=args.max_dur,
    )
    if args.val_fraction > 0:
        rng = np.random.default_rng(args.seed)
        train, val = split_validation(manifest, args.val_fraction, rng)
        save_manifest(train, out / "train.tsv")
        save_manifest(val, out / "val.tsv")
        print(f"wrote {len(manifest)} utterances, split {len(train)}/{len(val)} into {out}")
    else:
        print(f"wrote {len(manifest)} utterances into {out}")
    return 0


def _cmd_pretrain(args) -> int:
    from .trainer import SslTrainer

    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved.cfg")
    train_manifest = load_manifest(args.train_manifest)
    val_manifest = load_manifest(args.val_manifest, subset="val")
    trainer = SslTrainer(cfg, train_manifest, val_manifest, out_dir=out)
    records = trainer.run()
    last = records[-1]
    print(
        f"finished {trainer.step} steps: loss_total={last.loss_total:.4f} "
        f"accuracy={last.accuracy:.4f} (metrics in {out / 'metrics.csv'})"
    )
    return 0


def _cmd_finetune(args) -> int:
    from .ctc import CtcFinetuner, write_eval_csv

    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved.cfg")
    train_manifest = load_manifest(args.train_manifest)
    val_manifest = load_manifest(args.val_manifest, subset="val")
    init = None if args.init == "scratch" else args.init
    tuner = CtcFinetuner(cfg, train_manifest, val_manifest, init_checkpoint=init, out_dir=out)
    tuner.run()
    tuner.save(out / "final.ckpt")
    tuner.write_history(out / "ft_metrics.csv")
    result = tuner.evaluate()
    write_eval_csv(result, out / "eval_report.csv")
    print(f"fine-tuned {tuner.step} steps: WER={result.wer:.4f} CER={result.cer:.4f}")
    return 0


def _cmd_probe_gradvar(args) -> int:
    from .grad_probe import probe, write_probe_csv

    checkpoints = [Path(c) for c in args.checkpoint]
    if args.run_dir:
        checkpoints += sorted(Path(args.run_dir).glob("step-*.ckpt"))
    if not checkpoints:
        raise UsageError("provide --run-dir or at least one --checkpoint")
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = [
        probe(ckpt, manifest, n_batches=args.n_batches, seed=args.seed)
        for ckpt in checkpoints
    ]
    write_probe_csv(reports, out / "gradvar.csv")
    for r in reports:
        print(f"step={r.step} batch_seconds={r.batch_seconds:g} avg_std={r.avg_std:.6g}")
    return 0


def _cmd_eval(args) -> int:
    from .ctc import evaluate, load_asr_model, write_eval_csv

    model = load_asr_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = evaluate(model, manifest, model.cfg.ft_batch_seconds,
                      max_spread_seconds=model.cfg.max_spread_seconds)
    write_eval_csv(result, out / "eval_report.csv")
    print(f"WER={result.wer:.4f} CER={result.cer:.4f} over {len(result.rows)} utterances")
    return 0


def _cmd_data_seen(args) -> int:
    hours, epochs = data_seen(args.batch_seconds, args.iterations, args.dataset_hours)
    print(
        f"hours_upper={hours:.0f} (~{round(hours / 1000.0):g} k) "
        f"epochs_upper={epochs:.1f} (~{round(epochs):d})"
    )
    return 0


def _parse_pairs(text: str) -> list[tuple[float, int]]:
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if "x" not in chunk:
            raise UsageError(f"pair {chunk!r} must look like BATCH_SECONDSxITERATIONS")
        left, right = chunk.split("x", 1)
        try:
            pairs.append((float(left), int(right)))
        except ValueError:
            raise UsageError(f"cannot parse pair {chunk!r}") from None
    if not pairs:
        raise UsageError("no pairs given")
    return pairs


def _cmd_equal_data(args) -> int:
    from .experiments import run_equal_data

    cfg = _resolve_config(args)
    pairs = _parse_pairs(args.pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved.cfg")
    train_manifest = load_manifest(args.train_manifest)
    val_manifest = load_manifest(args.val_manifest, subset="val")
    rows = run_equal_data(cfg, pairs, train_manifest, val_manifest, out)
    for row in rows:
        print(
            f"batch_seconds={row['batch_seconds']:g} iterations={row['iterations']} "
            f"hours_seen={row['hours_seen']:.3f} "
            f"val_contrastive_per_step={row['val_contrastive_per_step']:.4f} cer={row['cer']:.4f}"
        )
    return 0


def _cmd_report(args) -> int:
    from .report import generate_report

    written = generate_report(args.run_dir, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "probe-gradvar": _cmd_probe_gradvar,
    "eval": _cmd_eval,
    "data-seen": _cmd_data_seen,
    "equal-data": _cmd_equal_data,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: category=usage message={e}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as e:
        print(f"error: category=runtime message={e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
