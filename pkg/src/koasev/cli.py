"""Command-line entry point: ``koasev <subcommand> [--seed S] [--out DIR]``.

Stage subcommands share one run directory. The effective configuration
(config file, then ``OUT/config.txt`` from an earlier stage, then flags) is
written back to ``OUT/config.txt`` so stages run separately agree with ``run``.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cnn_ref
from . import pipeline as pl
from .textio import write_csv, write_kv

GRAD_TOL = 1e-4


def _common(p):
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="run directory (default: run)")
    p.add_argument("--config", default=argparse.SUPPRESS, help="key-value config file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="koasev", description=__doc__.splitlines()[0])
    _common(ap)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, dest="synthetic_patients")
    p.add_argument("--icc", type=float, dest="synthetic_icc")
    p.add_argument("--icc-scale", choices=("response", "latent"), dest="synthetic_icc_scale")

    p = sub.add_parser("preprocess", help="filter columns, summarise, split patients")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--missing-max", type=float, dest="missing_max")
    p.add_argument("--minor-min", type=float, dest="minor_min")
    p.add_argument("--train-frac", type=float, dest="train_frac")

    sub.add_parser("correlate", help="mixed-type correlation heatmap table")

    p = sub.add_parser("fit-en", help="elastic net with grouped repeated CV")
    p.add_argument("--alpha", type=float, dest="en_alpha")
    p.add_argument("--folds", type=int, dest="en_folds")
    p.add_argument("--repeats", type=int, dest="en_repeats")

    p = sub.add_parser("fit-rf", help="random forest")
    p.add_argument("--trees", type=int, dest="rf_trees")
    p.add_argument("--mtry", dest="rf_mtry")

    p = sub.add_parser("fit-lmm", help="random-intercept mixed model")
    p.add_argument("--features", choices=("from-en", "all"), dest="lmm_features")

    sub.add_parser("evaluate", help="per-severity RMSE comparison tables")
    sub.add_parser("run", help="all stages in order, plus the manifest")

    p = sub.add_parser("cnn-check", help="layer shape table and gradient check")
    p.add_argument("--batch", type=int, default=4)

    p = sub.add_parser("cnn-train", help="train the downsized CNN on synthetic bar images")
    p.add_argument("--synthetic", type=int, default=100, metavar="N")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)

    for sp in sub.choices.values():
        _common(sp)
    return ap


_CONFIG_KEYS = {f for f in pl.PipelineConfig.__dataclass_fields__}


def resolve_config(args) -> pl.PipelineConfig:
    out = Path(getattr(args, "out", "run"))
    saved = out / "config.txt"
    if getattr(args, "config", None):
        cfg = pl.load_config(args.config)
    elif saved.exists():
        cfg = pl.load_config(saved)
    else:
        cfg = pl.PipelineConfig()
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None}
    if overrides:
        cfg = pl._coerce({**dict(cfg.items()), **overrides})
    if cfg.data:
        cfg = replace(cfg, data=str(Path(cfg.data).resolve()), schema=str(Path(cfg.schema).resolve()))
    return cfg


def cmd_cnn_check(args) -> int:
    net = cnn_ref.build_reference_network()
    rows = net.shape_table()
    print(f"{'layer':<10}{'kernels':>8}{'size':>8}{'stride':>8}  output_shape")
    for r in rows:
        print(f"{r['layer']:<10}{r['kernels']!s:>8}{r['kernel_size']:>8}{r['stride']!s:>8}  {r['output_shape']}")
    small = cnn_ref.init_network(cnn_ref.build_small_network(), args.seed, np.float64)
    report = cnn_ref.gradient_check(small, batch_size=args.batch, seed=args.seed)
    print("\ngradient check (downsized network, float64):")
    for k, v in report.items():
        print(f"  {k:<18} max_rel_err={v:.3e}")
    worst = max(report.values())
    ok = worst < GRAD_TOL
    print(f"gradient check {'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} (tol {GRAD_TOL:g})")
    if hasattr(args, "out"):
        out = Path(args.out)
        write_csv(out / "cnn/shape_table.csv", rows, ("layer", "kernels", "kernel_size", "stride", "output_shape"))
        write_kv(out / "cnn/gradient_check.txt", [*report.items(), ("max", worst), ("pass", ok)])
    return 0 if ok else 1


def cmd_cnn_train(args) -> int:
    if args.synthetic < 5:
        raise ValueError("--synthetic needs at least 5 images")
    out = Path(getattr(args, "out", "run"))
    X, y = cnn_ref.synthetic_bar_images(args.synthetic, seed=args.seed)
    Xv, yv = cnn_ref.synthetic_bar_images(max(args.synthetic // 4, 5), seed=args.seed + 1)
    net = cnn_ref.init_network(cnn_ref.build_small_network(), args.seed, np.float64)
    hist = cnn_ref.train(net, X, y, args.epochs, args.batch_size, seed=args.seed, validation=(Xv, yv))
    write_csv(out / "cnn/history.csv", hist, cnn_ref.HISTORY_COLUMNS)
    probs, _ = cnn_ref.forward(net, Xv, "eval")
    items = [*cnn_ref.model_header(net).items(), ("seed", args.seed), ("epochs", args.epochs),
             ("rmse_expectation", cnn_ref.rmse_from_probs(probs, yv, "expectation")),
             ("rmse_argmax", cnn_ref.rmse_from_probs(probs, yv, "argmax"))]
    write_kv(out / "cnn/report.txt", items)
    for r in hist:
        print(f"epoch {r['epoch']:>3}  train_loss={r['train_loss']:.4f}  val_loss={r['val_loss']:.4f}  "
              f"train_acc={r['train_acc']:.3f}  val_acc={r['val_acc']:.3f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("cnn-check", "cnn-train"):
        args.seed = getattr(args, "seed", 0)
        try:
            return (cmd_cnn_check if args.command == "cnn-check" else cmd_cnn_train)(args)
        except (ValueError, cnn_ref.TrainingDiverged) as exc:
            print(f"error: [{args.command}] {exc}", file=sys.stderr)
            return 1
    out = Path(getattr(args, "out", "run"))
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    pl.write_config(cfg, out / "config.txt")
    try:
        if args.command == "run":
            res = pl.run_pipeline(cfg, out)
            for rep in res["reports"]:
                print(f"{rep.label:<14} overall RMSE {rep.overall:.4f}")
            print(f"{res['baseline'].label:<14} overall RMSE {res['baseline'].overall:.4f}")
        else:
            if args.command == "synth" and not cfg.synthetic:
                raise pl.StageError("synth", "config names a data file; synth needs a synthetic config")
            pl.run_stage(args.command, cfg, out)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
