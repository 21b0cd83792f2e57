"""Command-line entry point: ``aseg {train,eval,predict,gradcheck,synth,ablate,loss-presets}``.

Exit codes: 0 success, 1 gradient check failed, 2 usage/config/input error,
3 non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .data import (PGMError, binarize_mask, ensure_parent, load_dataset_dir, load_image_pgm, resize_bilinear,
                   save_dataset_dir, save_heatmap, save_image_pgm, synth_dataset)
from .model import ModelParams
from .training import NonFiniteLossError, evaluate, predict_proba, split_dataset, train

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
SEED_ENV = "ASEG_SEED"


class UsageError(Exception):
    """Bad arguments or unusable inputs; maps to exit code 2."""


def config_help() -> str:
    lines = ["configuration keys (config file 'key = value', or --set key=value):",
             f"  {'key':<14} {'default':<19} meaning"]
    for key, default, doc, published in RunConfig.describe():
        note = f" [published setting: {published}]" if published else ""
        lines.append(f"  {key:<14} {default:<19} {doc}{note}")
    return "\n".join(lines)


def _split_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _seed_fallback(overrides: dict, config_path) -> None:
    """$ASEG_SEED applies only when neither flags nor the config file set a seed."""
    if "seed" in overrides or SEED_ENV not in os.environ:
        return
    if config_path is not None:
        from .config import parse_config_text

        try:
            if "seed" in parse_config_text(Path(config_path).read_text()):
                return
        except OSError:
            return  # load_run_config reports the unreadable file
    overrides["seed"] = os.environ[SEED_ENV]


def resolve_config(args) -> RunConfig:
    overrides: dict[str, object] = _split_sets(getattr(args, "set", None))
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("max_steps", "max_steps"),
                      ("batch_size", "batch_size"), ("seed", "seed"), ("dtype", "dtype"),
                      ("threshold", "threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    _seed_fallback(overrides, getattr(args, "config", None))
    return load_run_config(getattr(args, "config", None), overrides)


def _load_samples(args, cfg: RunConfig):
    if getattr(args, "synthetic", None) is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs n >= 1")
        return synth_dataset(args.synthetic, cfg.seed, size=cfg.input_size)
    if not args.data:
        raise UsageError("give a dataset directory or --synthetic N")
    try:
        return load_dataset_dir(args.data, size=cfg.input_size)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    samples = _load_samples(args, cfg)  # before touching the output directory
    tcfg = cfg.train_config()
    train_set, test_set, val_set = split_dataset(samples, tcfg.split, tcfg.seed)
    if not train_set:
        raise UsageError(f"split {tcfg.split} leaves no training samples out of {len(samples)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    (out / "split.txt").write_text("".join(f"{name},{s.id}\n" for name, part in
                                           (("train", train_set), ("test", test_set), ("val", val_set))
                                           for s in part))
    params = ModelParams.init(cfg.model_config(), seed=cfg.seed, dtype=cfg.dtype)
    log_path = out / "log.csv"
    result = train(params, train_set, val_set, tcfg, log_path=log_path,
                   on_epoch=None if args.quiet else _print_epoch)
    save_checkpoint(result.best_params, out / "best.ckpt", step=result.best_step)
    save_checkpoint(result.params, out / "last.ckpt", adam=result.adam, step=result.steps)
    print(f"trained {result.steps} steps; best epoch {result.best_epoch} score {result.best_score:.4f}")
    print(f"wrote {out / 'best.ckpt'}, {out / 'last.ckpt'}, {log_path}")
    return EXIT_OK


def _print_epoch(rec) -> None:
    print(f"epoch {rec.epoch:4d}  loss {rec.train_loss:.5f}  val_dice {rec.val_dice:.4f}  "
          f"train_dice {rec.train_dice:.4f}", flush=True)


def _load_ckpt(path, dtype: str):
    try:
        return load_checkpoint(path, dtype)
    except OSError as exc:
        raise UsageError(str(exc)) from None


def _check_threshold(t: float) -> None:
    if not 0 < t < 1:
        raise UsageError(f"--threshold must lie in (0, 1), got {t}")


def cmd_eval(args) -> int:
    _check_threshold(args.threshold)
    ckpt = _load_ckpt(args.checkpoint, args.dtype or "float32")
    model_keys = {k: getattr(ckpt.config, k) for k in RunConfig.MODEL_KEYS}
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    cfg = RunConfig(**model_keys).with_overrides({"seed": seed})
    samples = _load_samples(args, cfg)
    if args.split != "all":
        train_set, test_set, val_set = split_dataset(samples, cfg.train_config().split, seed)
        samples = {"train": train_set, "test": test_set, "val": val_set}[args.split]
        if not samples:
            raise UsageError(f"the {args.split} split is empty")
    report = evaluate(ckpt.params, samples, args.threshold)
    print(f"samples {len(samples)}  dice {report.dice:.6f}  iou {report.iou:.6f}")
    if args.csv:
        ensure_parent(args.csv)
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _check_threshold(args.threshold)
    ckpt = _load_ckpt(args.checkpoint, "float32")
    try:
        img = load_image_pgm(args.image)
    except (OSError, PGMError) as exc:
        raise UsageError(f"cannot read image {args.image}: {exc}") from None
    h, w = ckpt.config.input_size
    img = np.clip(resize_bilinear(img, h, w), 0.0, 1.0)
    trace: list[dict] = []
    prob = predict_proba(ckpt.params, img[None, None], trace=trace)[0, 0]
    mask = binarize_mask(prob, args.threshold)
    ensure_parent(args.out)
    save_image_pgm(mask.astype(np.float64), args.out)
    print(f"wrote {args.out} ({int(mask.sum())} foreground pixels)")
    if args.heatmap_dir:
        hd = Path(args.heatmap_dir)
        hd.mkdir(parents=True, exist_ok=True)
        written = 0
        for lvl, maps in enumerate(trace):
            for key in ("dal", "sal", "cbam_gate"):
                if key in maps:
                    save_heatmap(maps[key][0], hd / f"level{lvl}_{key}.pgm")
                    written += 1
        print(f"wrote {written} heatmaps to {hd}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_model

    report = gradcheck_model(size=args.size, levels=args.levels, base_channels=args.base_channels,
                             seed=args.seed, corrupt=args.corrupt_op, skip_mode=args.skip_mode)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    samples = synth_dataset(args.n, cfg.seed, size=cfg.input_size)
    save_dataset_dir(samples, args.out)
    print(f"wrote {len(samples)} image/mask pairs to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import format_ablation, run_ablation

    cfg = resolve_config(args)
    samples = synth_dataset(args.synthetic, cfg.seed, size=cfg.input_size)
    results = run_ablation(samples, None, cfg.model_config(), cfg.train_config(), cfg.dtype,
                           on_variant=lambda r: print(f"{r.label}: dice {r.dice:.4f} iou {r.iou:.4f} "
                                                      f"({r.steps} steps, {r.seconds:.0f}s)", flush=True))
    print(format_ablation(results))
    return EXIT_OK


def cmd_loss_presets(args) -> int:
    from .ablation import format_presets, run_loss_presets

    cfg = resolve_config(args)
    samples = synth_dataset(args.synthetic, cfg.seed, size=cfg.input_size)
    results = run_loss_presets(samples, cfg.model_config(), cfg.train_config(), cfg.dtype)
    print(format_presets(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def _config_args(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--seed", type=int, help=f"RNG seed (fallback: ${SEED_ENV})")
    p.add_argument("--dtype", choices=("float32", "float64"))
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, help="Adam learning rate")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--epochs-max-steps", "--max-steps", dest="max_steps", type=int,
                       help="stop after this many optimizer steps")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="aseg", description="Attention residual U-Net segmentation.",
                                     epilog=config_help(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model", epilog=config_help(), formatter_class=fmt)
    p.add_argument("data", nargs="?", help="dataset directory of <id>.pgm / <id>_mask.pgm pairs")
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic ellipse samples instead")
    p.add_argument("--out", default="run", help="output directory (default: run)")
    p.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data", nargs="?", help="dataset directory")
    p.add_argument("--synthetic", type=int, metavar="N", help="evaluate on N synthetic samples")
    p.add_argument("--split", choices=("all", "train", "test", "val"), default="all",
                   help="which seeded split of the dataset to score (default: all)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--csv", help="write per-sample rows here")
    p.add_argument("--seed", type=int, help=f"seed for synthetic data and the split (fallback: ${SEED_ENV})")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("checkpoint")
    p.add_argument("image", help="input PGM")
    p.add_argument("out", help="output mask PGM (values 0/255)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--heatmap-dir", help="write per-level DAL/SAL/CBAM-gate heatmaps here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--base-channels", type=int, default=2)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--skip-mode", choices=("series", "parallel_sum"), default="series")
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=8)
    _config_args(p, training=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train the four architecture variants on synthetic data")
    p.add_argument("--synthetic", type=int, default=32, metavar="N")
    _config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("loss-presets", help="train once per loss-weight preset on synthetic data")
    p.add_argument("--synthetic", type=int, default=8, metavar="N")
    _config_args(p)
    p.set_defaults(func=cmd_loss_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, PGMError, OSError) as exc:
        print(f"aseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"aseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
