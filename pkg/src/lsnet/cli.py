"""Command-line surface: train, enhance, eval, ablate, degrade, hist.

Shared flags: --seed, --config <file>, --out <dir>.  Config files are
line-oriented "key = value" text with # comments; command-line flags win
over config-file values.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .data import generate_synthetic_dataset, load_manifest
from .imageio import DataError, read_image, write_image
from .model import param_count
from .tensor import NumericError, ShapeError
from .train import (TrainConfig, ablate, enhance_image, evaluate,
                    histogram_report, plot_histograms, train,
                    write_histogram_csv)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_kv_file(path: str) -> dict:
    """Line-oriented 'key = value' config with # comments."""
    if not os.path.exists(path):
        raise DataError(f"{path}: config file not found")
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            out[key.strip()] = value.strip()
    return out


def _parse_size(text: str) -> tuple:
    try:
        h, _, w = text.lower().partition("x")
        return (int(h), int(w))
    except ValueError as exc:
        raise UsageError(f"bad size {text!r}, expected HxW") from exc


def _parse_triple(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    def pick(flag, key, cast, default):
        if flag is not None:
            return flag
        if key in file_cfg:
            return cast(file_cfg[key])
        return default

    ablation = pick(args.ablation, "ablation", str, "")
    flags = frozenset(f.strip() for f in ablation.split(",") if f.strip())
    resolution = pick(args.resolution, "resolution", str, None)
    return TrainConfig(
        epochs=pick(args.epochs, "epochs", int, 1000),
        lr=pick(args.lr, "lr", float, 3e-4),
        batch_size=pick(args.batch_size, "batch_size", int, 8),
        seed=pick(args.seed, "seed", int, 0),
        resolution=_parse_size(resolution) if resolution else (256, 256),
        val_interval=pick(args.val_interval, "val_interval", int, 10),
        ablation=flags,
        lift_channels=pick(args.lift_channels, "lift_channels", int, 16),
        region_rows=pick(args.region_rows, "region_rows", int, 2),
        region_cols=pick(args.region_cols, "region_cols", int, 2),
        topk=pick(args.topk, "topk", int, 2),
    )


def _default_manifest(args, out_dir: str) -> str:
    if args.manifest:
        return args.manifest
    synth_dir = os.path.join(out_dir, "synthetic")
    print(f"no manifest given; generating synthetic dataset in {synth_dir}")
    return generate_synthetic_dataset(synth_dir, seed=args.seed or 0)


def _add_train_flags(p):
    p.add_argument("--manifest", help="dataset manifest (default: synthesize)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--resolution", help="HxW, default 256x256")
    p.add_argument("--val-interval", dest="val_interval", type=int)
    p.add_argument("--ablation", help="comma list of no_x,no_dx,no_ox,no_topk")
    p.add_argument("--lift-channels", dest="lift_channels", type=int)
    p.add_argument("--region-rows", dest="region_rows", type=int)
    p.add_argument("--region-cols", dest="region_cols", type=int)
    p.add_argument("--topk", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="lsnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = dict(seed=("--seed", int), config=("--config", str), out=("--out", str))

    def new_cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default="out")
        return p

    p = new_cmd("train", "train the enhancer")
    _add_train_flags(p)

    p = new_cmd("enhance", "enhance images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--emit-decomposition", action="store_true")
    p.add_argument("images", nargs="+")

    p = new_cmd("eval", "score a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, choices=("train", "val", "test"))
    p.add_argument("--resolution")

    p = new_cmd("ablate", "train/evaluate full model and all ablations")
    _add_train_flags(p)

    p = new_cmd("degrade", "generate a synthetic degraded dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--heldout", type=int, default=5)
    p.add_argument("--size", default="64x64")
    p.add_argument("--eta", default="0.8,0.2,0.4")
    p.add_argument("--ambient", default="0.75,0.85,0.8")
    p.add_argument("--depth-min", dest="depth_min", type=float, default=0.5)
    p.add_argument("--depth-max", dest="depth_max", type=float, default=2.5)
    p.add_argument("--fs-gain", dest="fs_gain", type=float, default=0.0)

    p = new_cmd("hist", "per-channel histogram report")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("images", nargs="+")
    return parser


def _cmd_train(args) -> int:
    file_cfg = parse_kv_file(args.config) if args.config else {}
    cfg = _train_config(args, file_cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest = _default_manifest(args, args.out)
    result = train(cfg, manifest, args.out)
    total, _ = param_count(result.final_params)
    print(f"trained {cfg.epochs} epochs; parameters: {total}")
    print(f"final train L1: {result.loss_history[-1]:.6f}")
    if np.isfinite(result.best_val_psnr):
        print(f"best validation PSNR: {result.best_val_psnr:.4f} dB")
    print(f"checkpoints: {result.checkpoint_path} (final), "
          f"{result.best_checkpoint_path} (best)")
    return 0


def _cmd_enhance(args) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        image = read_image(path)
        maps = enhance_image(params, image)
        stem, ext = os.path.splitext(os.path.basename(path))
        ext = ext if ext.lower() in (".ppm", ".png") else ".png"
        write_image(os.path.join(args.out, f"{stem}_enhanced{ext}"), maps["output"])
        if args.emit_decomposition:
            # signed maps displayed around mid-gray: v -> 0.5 + v/2
            for key in ("dx", "ox"):
                vis = np.clip(0.5 + maps[key] / 2.0, 0.0, 1.0)
                write_image(os.path.join(args.out, f"{stem}_{key}{ext}"), vis)
        print(f"enhanced {path}")
    return 0


def _cmd_eval(args) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    entries = load_manifest(args.manifest)
    if args.split:
        entries = [e for e in entries if e.split == args.split]
        if not entries:
            raise DataError(f"no '{args.split}' entries in {args.manifest}")
    resolution = _parse_size(args.resolution) if args.resolution else None
    report = evaluate(params, entries, resolution)
    csv_text = report.to_csv()
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "metrics.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    print(f"wrote {out_path}")
    return 0


def _cmd_ablate(args) -> int:
    file_cfg = parse_kv_file(args.config) if args.config else {}
    cfg = _train_config(args, file_cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest = _default_manifest(args, args.out)
    outcome = ablate(cfg, manifest, args.out)
    print("variant      val_psnr   params")
    for name, data in outcome.items():
        total, _ = param_count(data["result"].final_params)
        print(f"{name:<12} {data['result'].best_val_psnr:>8.4f}   {total}")
    print(f"wrote {os.path.join(args.out, 'ablation.csv')}")
    return 0


def _cmd_degrade(args) -> int:
    manifest = generate_synthetic_dataset(
        args.out,
        seed=args.seed or 0,
        train_count=args.count,
        heldout_count=args.heldout,
        size=_parse_size(args.size),
        eta=_parse_triple(args.eta),
        ambient=_parse_triple(args.ambient),
        depth_range=(args.depth_min, args.depth_max),
        fs_gain=args.fs_gain,
    )
    print(f"wrote {manifest}")
    return 0


def _cmd_hist(args) -> int:
    params = None
    if args.checkpoint:
        params, _, _ = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    images = {}
    for path in args.images:
        stem = os.path.splitext(os.path.basename(path))[0]
        raw = read_image(path)
        images[f"raw:{stem}"] = raw
        if params is not None:
            maps = enhance_image(params, raw)
            images[f"enhanced:{stem}"] = maps["output"]
            images[f"delta:{stem}"] = maps["dx"] - maps["ox"]
    hists = histogram_report(images)
    csv_path = os.path.join(args.out, "histograms.csv")
    plot_path = os.path.join(args.out, "histograms.png")
    write_histogram_csv(csv_path, hists)
    plot_histograms(plot_path, hists)
    print(f"wrote {csv_path} and {plot_path}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "enhance": _cmd_enhance,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "degrade": _cmd_degrade,
    "hist": _cmd_hist,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
