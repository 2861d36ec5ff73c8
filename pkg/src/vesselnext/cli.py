"""Command-line surface: preprocess, train, segment, eval.

All hyper-parameters come from defaults, overridden by a JSON config file
(--config), overridden in turn by explicit flags. Unknown config keys are
rejected. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
VESSELNEXT_THREADS caps per-image worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import imgio, pipeline
from .model import ModelConfig, build, count_cost
from .trainer import (
    EvalConfig,
    TrainConfig,
    evaluate,
    fit,
    history_csv,
    load_checkpoint,
    predict_image,
    save_checkpoint,
)

MODEL_KEYS = {"n1": 1, "n2": 3, "base_channels": 32, "heads": 4, "subsample_k": 256,
              "patch": 128, "in_channels": 1, "out_channels": 1, "fusion_depth": 1}
TRAIN_KEYS = {"epochs": 25, "batch": 8, "lr": 0.0005, "patience": 5, "seed": 0,
              "patches_per_image": 15000, "val_patches_per_image": None,
              "materialize": False, "stride": 12, "threshold": 0.5}
PIPE_KEYS = {"clahe": True, "tiles": 8, "clip_limit": 2.0, "gamma": 1.2}
IO_KEYS = {"manifest": None, "out": "out", "resume": None}
ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, **PIPE_KEYS, **IO_KEYS}


class ConfigError(ValueError):
    pass


def load_run_config(config_path, overrides: dict) -> dict:
    cfg = dict(ALL_KEYS)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
        unknown = sorted(set(doc) - set(ALL_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def split_config(cfg: dict):
    model = ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
    prep = pipeline.PreprocessParams(clahe=cfg["clahe"], tiles=cfg["tiles"],
                                     clip_limit=cfg["clip_limit"], gamma=cfg["gamma"])
    train = TrainConfig(epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"],
                        patience=cfg["patience"], seed=cfg["seed"],
                        patches_per_image=cfg["patches_per_image"],
                        val_patches_per_image=cfg["val_patches_per_image"],
                        materialize=cfg["materialize"], stride=cfg["stride"],
                        threshold=cfg["threshold"], preprocess=prep)
    return model, train, prep


def worker_count(n_items: int) -> int:
    cap = os.environ.get("VESSELNEXT_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_items))


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args.config, vars_of(args))
    if cfg["manifest"] is None:
        raise ConfigError("a manifest is required (--manifest)")
    splits = pipeline.load_manifest(cfg["manifest"])
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    prep = pipeline.PreprocessParams(clahe=cfg["clahe"], tiles=cfg["tiles"],
                                     clip_limit=cfg["clip_limit"], gamma=cfg["gamma"])
    samples = [s for split in splits.values() for s in split]

    def one(sample):
        raster = pipeline.preprocess(sample.image, prep)
        imgio.write_pgm16(outdir / f"{sample.id}_pre.pgm", raster)
        return sample.id

    failures = []
    results = []
    with ThreadPoolExecutor(max_workers=worker_count(len(samples))) as pool:
        futures = {pool.submit(one, s): s.id for s in samples}
        for fut, sid in futures.items():
            try:
                results.append(fut.result())
            except Exception as exc:  # per-file failure, keep going
                failures.append(sid)
                print(f"error: {sid}: {exc}", file=sys.stderr)

    log = {"params": prep.describe(), "processed": sorted(results),
           "failed": sorted(failures)}
    _write_text(outdir / "preprocess_log.json", json.dumps(log, indent=2) + "\n")
    print(f"preprocessed {len(results)}/{len(samples)} images -> {outdir}")
    return 1 if failures else 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, vars_of(args))
    if cfg["manifest"] is None:
        raise ConfigError("a manifest is required (--manifest)")
    manifest_path = Path(cfg["manifest"])
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    splits = pipeline.load_manifest(manifest_path)
    model_cfg, train_cfg, _ = split_config(cfg)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)

    start_epoch, state = 0, None
    if cfg["resume"]:
        model, state, start_epoch, _ = load_checkpoint(cfg["resume"])
        print(f"resuming from {cfg['resume']} at epoch {start_epoch}")
    else:
        model = build(model_cfg.validate(), seed=cfg["seed"])

    report = count_cost(model)
    _write_text(outdir / "cost_report.txt", report.as_text())
    _write_text(outdir / "cost_report.csv", report.as_csv())

    history, state = fit(model, splits.get("train", []), splits.get("val", []),
                         train_cfg, start_epoch=start_epoch, state=state)
    best_val = min(v for _, _, v in history) if history else 0.0
    epochs_done = history[-1][0] + 1 if history else start_epoch
    save_checkpoint(outdir / "best.tunx", model, state=state,
                    epoch=epochs_done, best_val=best_val)
    _write_text(outdir / "history.csv", history_csv(history))
    print(f"trained {len(history)} epochs, best val loss {best_val:.5f} -> {outdir}")
    return 0


def cmd_segment(args) -> int:
    cfg = load_run_config(args.config, vars_of(args))
    model, _, _, _ = load_checkpoint(args.checkpoint)
    if args.patch is not None and args.patch != model.config.patch:
        raise ConfigError(f"patch mismatch: flag says {args.patch}, checkpoint "
                          f"was trained at {model.config.patch}")
    prep = pipeline.PreprocessParams(clahe=cfg["clahe"], tiles=cfg["tiles"],
                                     clip_limit=cfg["clip_limit"], gamma=cfg["gamma"])
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    image = imgio.read_image(args.image)
    raster = pipeline.preprocess(image, prep)
    prob = predict_image(model, raster, stride=cfg["stride"], batch=cfg["batch"])
    mask = pipeline.binarize(prob, cfg["threshold"])
    stem = Path(args.image).stem
    imgio.write_pgm16(outdir / f"{stem}_prob.pgm", prob)
    imgio.write_png_mask(outdir / f"{stem}_mask.png", mask)
    print(f"segmented {args.image} -> {outdir}/{stem}_prob.pgm, {stem}_mask.png")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, vars_of(args))
    if cfg["manifest"] is None:
        raise ConfigError("a manifest is required (--manifest)")
    splits = pipeline.load_manifest(cfg["manifest"])
    if not splits.get("test"):
        raise ConfigError("manifest has no test split")
    model, _, _, _ = load_checkpoint(args.checkpoint)
    prep = pipeline.PreprocessParams(clahe=cfg["clahe"], tiles=cfg["tiles"],
                                     clip_limit=cfg["clip_limit"], gamma=cfg["gamma"])
    eval_cfg = EvalConfig(batch=cfg["batch"], stride=cfg["stride"],
                          threshold=cfg["threshold"], preprocess=prep,
                          workers=worker_count(len(splits["test"])))
    report = evaluate(model, splits["test"], eval_cfg)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    _write_text(outdir / "summary.csv", report.summary_csv())
    _write_text(outdir / "per_image.csv", report.per_image_csv())
    _write_text(outdir / "cal.csv", report.cal_csv())
    _write_text(outdir / "roc.csv", report.roc.as_csv())
    for r in report.images:
        imgio.write_pgm16(outdir / f"{r.id}_prob.pgm", r.prob)
    cols = ["auc", "sp", "se", "precision", "f1", "acc"]
    print("  ".join(cols))
    print("  ".join(f"{report.aggregate[c]:.4f}" for c in cols))
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def vars_of(args) -> dict:
    fields = dict(vars(args))
    for meta in ("func", "command", "config", "checkpoint", "image"):
        fields.pop(meta, None)
    if fields.pop("no_clahe", None):
        fields["clahe"] = False
    return fields


def _add_common(p: argparse.ArgumentParser, include=()):
    p.add_argument("--config", help="JSON run config; flags override its keys")
    p.add_argument("--out", help=f"output directory (default {ALL_KEYS['out']})")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    if "manifest" in include:
        p.add_argument("--manifest", help="dataset manifest JSON")
    if "pipeline" in include:
        p.add_argument("--no-clahe", action="store_true", default=None,
                       help="disable adaptive equalization")
        p.add_argument("--gamma", type=float, help="gamma exponent (default 1.2)")
    if "infer" in include:
        p.add_argument("--stride", type=int, help="overlap-crop step (default 12)")
        p.add_argument("--threshold", type=float, help="binarization threshold (default 0.5)")
        p.add_argument("--batch", type=int, help="patches per forward batch (default 8)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselnext",
        description="Retinal vessel segmentation: preprocessing, training, "
                    "inference and evaluation.",
        epilog="Config keys and defaults: "
               + ", ".join(f"{k}={v}" for k, v in ALL_KEYS.items()))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="write preprocessed rasters for a manifest")
    _add_common(p, include=("manifest", "pipeline"))
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit a model on the train/val splits")
    _add_common(p, include=("manifest", "pipeline", "infer"))
    p.add_argument("--epochs", type=int, help="max epochs (default 25)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.0005)")
    p.add_argument("--patience", type=int, help="early-stop patience (default 5)")
    p.add_argument("--patches-per-image", type=int, dest="patches_per_image",
                   help="training patches drawn per image (default 15000)")
    p.add_argument("--materialize", action="store_true", default=None,
                   help="draw the patch set once and reuse it every epoch")
    p.add_argument("--patch", type=int, help="patch side (default 128)")
    p.add_argument("--base-channels", type=int, dest="base_channels",
                   help="stage-0 channel count (default 32)")
    p.add_argument("--n1", type=int, help="pure-conv stages (default 1)")
    p.add_argument("--n2", type=int, help="hybrid stages (default 3)")
    p.add_argument("--heads", type=int, help="attention heads (default 4)")
    p.add_argument("--subsample-k", type=int, dest="subsample_k",
                   help="key/value token target (default 256)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one image with a checkpoint")
    _add_common(p, include=("pipeline", "infer"))
    p.add_argument("--checkpoint", required=True, help="TUNX checkpoint path")
    p.add_argument("--image", required=True, help="fundus image (PNG/PGM/PPM)")
    p.add_argument("--patch", type=int,
                   help="must match the checkpoint; refused otherwise")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p, include=("manifest", "pipeline", "infer"))
    p.add_argument("--checkpoint", required=True, help="TUNX checkpoint path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
