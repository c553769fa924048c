"""Command line: gen-data, train, eval, gradcheck, dump-embeddings.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, format_config, load_config
from .data import DatasetError, generate_synthetic, load_dataset_dir, save_dataset
from .evaluation import evaluate, metrics_csv, metrics_row
from .losses import ContrastiveVariant
from .models import CheckpointError
from .pipeline import (
    SEED_EVAL,
    NumericalAbort,
    load_checkpoint,
    save_checkpoint,
    synthesize_unseen,
    train,
)
from .ndcore import Rng

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_FILE = "checkpoint.pcem"
REPORT_FILE = "report.csv"
CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"

log = logging.getLogger("pcegzsl")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, newline="\n")


def cmd_gen_data(args) -> int:
    _, spec = load_config(args.config)
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out)
    print(ds.summary())
    return EXIT_OK


def _train_one(cfg, spec, ds, out: Path, resume: Path | None, evaluate_after: bool):
    state = load_checkpoint(resume, ds, cfg) if resume else None
    nets, _, report, state = train(ds, cfg, state=state)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_FILE, state)
    _write(out / REPORT_FILE, report.to_csv())
    _write(out / CONFIG_FILE, format_config(cfg, spec))
    if not evaluate_after:
        return None
    m = evaluate(nets, ds, cfg)
    row = metrics_row(cfg.variant.value, m)
    _write(out / METRICS_FILE, metrics_csv([row]))
    return row


def cmd_train(args) -> int:
    cfg, spec = load_config(args.config)
    ds = load_dataset_dir(args.data)
    out = Path(args.out)
    if args.variant == "all":
        if args.resume:
            raise ConfigError("--resume cannot be combined with --variant all")
        rows = []
        for v in ContrastiveVariant:
            rows.append(_train_one(cfg.replace(variant=v), spec, ds, out / v.value, None, True))
            print(rows[-1])
        _write(out / METRICS_FILE, metrics_csv(rows))
        return EXIT_OK
    if args.variant:
        cfg = cfg.replace(variant=args.variant)
    row = _train_one(cfg, spec, ds, out, Path(args.resume) if args.resume else None, not args.skip_eval)
    if row is not None:
        print(metrics_csv([row]), end="")
    return EXIT_OK


def _load_trained(args):
    ckpt = Path(args.checkpoint)
    cfg_path = args.config or ckpt.parent / CONFIG_FILE
    cfg, _ = load_config(cfg_path)
    if getattr(args, "synth_per_class", None) is not None:
        if args.synth_per_class < 1:
            raise ConfigError("--synth-per-class must be positive")
        cfg = cfg.replace(n_synth_per_unseen=args.synth_per_class)
    ds = load_dataset_dir(args.data)
    state = load_checkpoint(ckpt, ds, cfg)
    return cfg, ds, state


def cmd_eval(args) -> int:
    cfg, ds, state = _load_trained(args)
    m = evaluate(state.nets, ds, cfg)
    setting = args.setting or ("zsl" if args.mode == "zsl" else cfg.variant.value)
    text = metrics_csv([metrics_row(setting, m, args.mode)])
    _write(Path(args.out) if args.out else Path(args.checkpoint).parent / METRICS_FILE, text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run_suite(args.seed, args.configs, corrupt=args.corrupt)
    print(f"{'term':<18} {'max_rel_err':>12}  result")
    for r in rows:
        print(f"{r.term:<18} {r.max_rel_error:>12.3e}  {'pass' if r.passed else 'FAIL'}")
    failed = [r.term for r in rows if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}")
        return 1
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    """E-space embeddings of real test rows (flag 0) and synthetic unseen rows (flag 1)."""
    cfg, ds, state = _load_trained(args)
    rng = Rng(cfg.seed).child(SEED_EVAL)
    feats, labels = synthesize_unseen(state.nets.g, ds, cfg.n_synth_per_unseen, rng)
    real_idx = np.concatenate([ds.test_seen_idx, ds.test_unseen_idx])
    emb = state.nets.e(np.vstack([ds.features[real_idx], feats]))
    lab = np.concatenate([ds.labels[real_idx], labels])
    flag = np.concatenate([np.zeros(len(real_idx), dtype=int), np.ones(len(labels), dtype=int)])
    header = ",".join([f"e{j}" for j in range(emb.shape[1])] + ["label", "fake"])
    lines = [header]
    for row, y, f in zip(emb, lab, flag):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(y)},{int(f)}")
    _write(Path(args.out), "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcegzsl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write checkpoint, report and metrics")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=[v.value for v in ContrastiveVariant] + ["all"])
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--skip-eval", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="GZSL/ZSL metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    e.add_argument("--mode", choices=["both", "gzsl", "zsl"], default="both")
    e.add_argument("--synth-per-class", type=int)
    e.add_argument("--setting", help="label for the metrics row")
    e.add_argument("--out", help="metrics CSV path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--configs", type=int, default=100)
    c.add_argument("--corrupt", choices=gradcheck.LOSS_TERMS, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-embeddings", help="CSV of real and synthetic embeddings")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--synth-per-class", type=int)
    d.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
