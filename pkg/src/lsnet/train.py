"""Training loop, evaluation, ablation harness and histogram analysis."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import metrics as iqa
from .checkpoint import save_checkpoint
from .data import PairDataset, load_manifest
from .imageio import DataError, read_image, resize_chw
from .model import (LSNetConfig, LSNetParams, crop_to, forward, init_params,
                    pad_to_grid, param_count)
from .ops import l1_loss
from .optim import Adam
from .tensor import NumericError, Tensor, no_grad


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 3e-4
    batch_size: int = 8
    seed: int = 0
    resolution: tuple = (256, 256)
    val_interval: int = 10
    ablation: frozenset = frozenset()
    lift_channels: int = 16
    region_rows: int = 2
    region_cols: int = 2
    topk: int = 2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    def model_config(self) -> LSNetConfig:
        return LSNetConfig(
            lift_channels=self.lift_channels,
            region_rows=self.region_rows,
            region_cols=self.region_cols,
            topk=self.topk,
            ablation=frozenset(self.ablation),
            input_size=self.resolution,
        )


@dataclass
class TrainResult:
    final_params: LSNetParams
    best_params: LSNetParams
    curve: list                      # (epoch, train_l1, val_psnr)
    loss_history: list
    best_val_psnr: float
    checkpoint_path: str | None = None
    best_checkpoint_path: str | None = None


def clone_params(params: LSNetParams) -> LSNetParams:
    out = init_params(params.config, seed=0)
    for name, t in params.tensors.items():
        out.tensors[name].data = t.data.copy()
    for site, state in params.bn.items():
        out.bn[site].running_mean = state.running_mean.copy()
        out.bn[site].running_var = state.running_var.copy()
    return out


def _first_nonfinite(params: LSNetParams, loss: Tensor) -> str:
    for name, t in params.tensors.items():
        if not np.isfinite(t.data).all():
            return name
        if t.grad is not None and not np.isfinite(t.grad).all():
            return f"grad({name})"
    return "loss"


def enhance_image(params: LSNetParams, image: np.ndarray) -> dict:
    """Run the model on one (3, H, W) image in eval mode.

    Odd sizes are reflect-padded to grid divisibility and cropped back.
    Returns the clamped output plus the raw decomposition maps.
    """
    grid = params.config.grid
    batch = image[None].astype(np.float64)
    padded, orig = pad_to_grid(batch, grid)
    with no_grad():
        dec = forward(Tensor(padded), params, training=False)
    return {
        "output": crop_to(np.clip(dec.output.data[0], 0.0, 1.0), orig),
        "dx": crop_to(dec.dx.data[0].astype(np.float64), orig),
        "ox": crop_to(dec.ox.data[0].astype(np.float64), orig),
    }


def validation_psnr(params: LSNetParams, dataset: PairDataset) -> float:
    scores = []
    for _, raw, ref in dataset.items:
        out = enhance_image(params, raw)["output"]
        scores.append(iqa.psnr(out, ref))
    return float(np.mean(scores))


def train(config: TrainConfig, manifest_path: str, out_dir: str | None = None) -> TrainResult:
    """Adam + L1 training with periodic validation.

    Emits the final and the best-by-validation checkpoints when out_dir is
    given; the validation curve is the (epoch, train L1, val PSNR) series.
    Every number is a pure function of (seed, config, manifest).
    """
    entries = load_manifest(manifest_path)
    train_set = PairDataset(entries, "train", config.resolution)
    try:
        val_set = PairDataset(entries, "val", config.resolution)
    except DataError:
        val_set = None

    model_cfg = config.model_config()
    params = init_params(model_cfg, seed=config.seed)
    opt = Adam(params.trainable(), lr=config.lr)

    curve: list = []
    losses: list = []
    best_psnr = -np.inf
    best_params = clone_params(params)

    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for raws, refs in train_set.batches(config.batch_size, config.seed, epoch):
            opt.zero_grad()
            dec = forward(Tensor(raws), params, training=True)
            loss = l1_loss(dec.output, Tensor(refs))
            value = float(loss.data[0])
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; first non-finite tensor: "
                    f"{_first_nonfinite(params, loss)}")
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        mean_loss = float(np.mean(epoch_losses))
        losses.append(mean_loss)
        if val_set is not None and (epoch % config.val_interval == 0 or epoch == config.epochs):
            vp = validation_psnr(params, val_set)
            curve.append((epoch, mean_loss, vp))
            if vp > best_psnr:
                best_psnr = vp
                best_params = clone_params(params)
        elif val_set is None and epoch == config.epochs:
            curve.append((epoch, mean_loss, float("nan")))

    if val_set is None:
        best_params = clone_params(params)

    result = TrainResult(final_params=params, best_params=best_params, curve=curve,
                         loss_history=losses, best_val_psnr=best_psnr)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.checkpoint_path = os.path.join(out_dir, "final.lsnt")
        result.best_checkpoint_path = os.path.join(out_dir, "best.lsnt")
        save_checkpoint(result.checkpoint_path, params,
                        step=opt.step_count, optimizer=opt)
        save_checkpoint(result.best_checkpoint_path, best_params, step=opt.step_count)
        with open(os.path.join(out_dir, "curve.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch", "train_l1", "val_psnr"))
            for row in curve:
                writer.writerow((row[0], f"{row[1]:.8f}", f"{row[2]:.6f}"))
    return result


def evaluate(params: LSNetParams, entries: list, resolution: tuple | None = None) -> iqa.MetricsReport:
    """Score every manifest entry; full-reference columns need references.

    Mixed manifests compute PSNR/SSIM on the paired subset only; the report
    notes the split so the aggregate is read correctly.
    """
    report = iqa.MetricsReport()
    paired = unpaired = 0
    for e in entries:
        raw = read_image(e.raw)
        ref = read_image(e.reference) if e.reference else None
        if resolution is not None:
            raw = resize_chw(raw, resolution)
            if ref is not None:
                ref = resize_chw(ref, resolution)
        out = enhance_image(params, raw)["output"]
        rec = iqa.score_image(out, ref)
        report.add(os.path.basename(e.raw), **rec)
        paired += ref is not None
        unpaired += ref is None
    if paired and unpaired:
        report.records.append({
            "name": f"# note: full-reference metrics cover {paired} paired "
                    f"of {paired + unpaired} entries"})
    return report


ABLATION_VARIANTS = {
    "full": frozenset(),
    "wo_x": frozenset({"no_x"}),
    "wo_dx": frozenset({"no_dx"}),
    "wo_ox": frozenset({"no_ox"}),
    "wo_topk": frozenset({"no_topk"}),
}


def ablate(config: TrainConfig, manifest_path: str, out_dir: str | None = None) -> dict:
    """Train and evaluate the full model and all four ablations, one seed.

    Returns {variant: {"result": TrainResult, "report": MetricsReport}} and
    writes a comparison table when out_dir is given.
    """
    entries = load_manifest(manifest_path)
    heldout = [e for e in entries if e.split in ("val", "test")]
    outcome = {}
    for name, flags in ABLATION_VARIANTS.items():
        variant_cfg = replace(config, ablation=flags)
        sub_dir = os.path.join(out_dir, name) if out_dir else None
        result = train(variant_cfg, manifest_path, sub_dir)
        report = evaluate(result.best_params, heldout, config.resolution)
        outcome[name] = {"result": result, "report": report}
    if out_dir is not None:
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("variant", "val_psnr", "psnr", "ssim", "uiqm",
                             "uism", "uciqe", "param_count"))
            for name, data in outcome.items():
                rep = data["report"]
                total, _ = param_count(data["result"].final_params)
                writer.writerow((
                    name, f"{data['result'].best_val_psnr:.6f}",
                    *(("" if rep.mean(k) is None else f"{rep.mean(k):.6f}")
                      for k in ("psnr", "ssim", "uiqm", "uism", "uciqe")),
                    total))
    return outcome


def histogram_report(images: dict, bins: int = 256) -> dict:
    """256-bin per-channel histograms.

    [0, 1] data (raw/enhanced) uses bin edges over [0, 1]; signed maps
    (dx - ox) use [-1, 1].  Values are clipped into range first so each
    channel's counts always sum to H*W.
    """
    out = {}
    for label, image in images.items():
        signed = bool(np.min(image) < 0.0) or label.startswith("delta")
        lo, hi = (-1.0, 1.0) if signed else (0.0, 1.0)
        counts = np.stack([
            np.histogram(np.clip(image[c], lo, hi), bins=bins, range=(lo, hi))[0]
            for c in range(image.shape[0])
        ])
        out[label] = {"counts": counts, "range": (lo, hi)}
    return out


def write_histogram_csv(path: str, histograms: dict, bins: int = 256) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("label", "channel", "bin", "bin_left", "count"))
        for label, data in histograms.items():
            lo, hi = data["range"]
            edges = np.linspace(lo, hi, bins + 1)
            for c, channel_name in enumerate(("red", "green", "blue")):
                for b in range(bins):
                    writer.writerow((label, channel_name, b,
                                     f"{edges[b]:.6f}", int(data["counts"][c, b])))


def plot_histograms(path: str, histograms: dict, bins: int = 256) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(histograms)
    fig, axes = plt.subplots(len(labels), 3, figsize=(12, 3 * len(labels)),
                             squeeze=False)
    for row, label in enumerate(labels):
        data = histograms[label]
        lo, hi = data["range"]
        centers = np.linspace(lo, hi, bins, endpoint=False) + (hi - lo) / (2 * bins)
        for c, (channel_name, color) in enumerate(zip(("red", "green", "blue"),
                                                      ("r", "g", "b"))):
            ax = axes[row][c]
            ax.plot(centers, data["counts"][c], color=color, linewidth=0.8)
            ax.set_title(f"{label} / {channel_name}", fontsize=9)
            ax.set_xlim(lo, hi)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
