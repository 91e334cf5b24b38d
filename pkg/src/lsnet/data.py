"""Dataset manifests, deterministic batch iteration, synthetic data generation.

A manifest is a plain-text file, one entry per line:

    split,raw_path[,reference_path]

where split is train, val or test.  Lines starting with # are comments.
Paths are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import physics
from .imageio import DataError, read_image, resize_chw, write_ppm

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    raw: str
    reference: str | None
    split: str


def load_manifest(path: str) -> list:
    if not os.path.exists(path):
        raise DataError(f"{path}: manifest not found")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (2, 3) or parts[0] not in SPLITS:
                raise DataError(f"{path}:{ln}: expected 'split,raw[,ref]', got {line!r}")
            raw = parts[1] if os.path.isabs(parts[1]) else os.path.join(base, parts[1])
            ref = None
            if len(parts) == 3 and parts[2]:
                ref = parts[2] if os.path.isabs(parts[2]) else os.path.join(base, parts[2])
            entries.append(ManifestEntry(raw=raw, reference=ref, split=parts[0]))
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return entries


def save_manifest(path: str, entries: list) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            raw = os.path.relpath(e.raw, base)
            if e.reference:
                fh.write(f"{e.split},{raw},{os.path.relpath(e.reference, base)}\n")
            else:
                fh.write(f"{e.split},{raw}\n")


class PairDataset:
    """Decoded, resized, [0, 1]-scaled image pairs for one split."""

    def __init__(self, entries: list, split: str, resolution: tuple | None = None):
        self.items = []
        for e in entries:
            if e.split != split:
                continue
            raw = read_image(e.raw)
            ref = read_image(e.reference) if e.reference else None
            if resolution is not None:
                raw = resize_chw(raw, resolution)
                if ref is not None:
                    ref = resize_chw(ref, resolution)
            if ref is not None and ref.shape != raw.shape:
                raise DataError(
                    f"{e.raw}: pair dimensions differ after resize: "
                    f"{raw.shape} vs {ref.shape}")
            self.items.append((e, raw, ref))
        if not self.items:
            raise DataError(f"manifest has no '{split}' entries")

    def __len__(self):
        return len(self.items)

    def batches(self, batch_size: int, seed: int, epoch: int):
        """Deterministic per-epoch shuffle: order is a function of (seed, epoch)."""
        order = np.random.default_rng([seed, epoch]).permutation(len(self.items))
        for lo in range(0, len(order), batch_size):
            chunk = order[lo:lo + batch_size]
            raws = np.stack([self.items[i][1] for i in chunk])
            refs = [self.items[i][2] for i in chunk]
            if any(r is None for r in refs):
                raise DataError("training batches need paired entries")
            yield raws, np.stack(refs)


def generate_synthetic_dataset(out_dir: str, seed: int = 0, train_count: int = 20,
                               heldout_count: int = 5, size: tuple = (64, 64),
                               eta: tuple = (0.8, 0.2, 0.4),
                               ambient: tuple = (0.75, 0.85, 0.8),
                               depth_range: tuple = (0.5, 2.5),
                               fs_gain: float = 0.0) -> str:
    """Write clean/degraded PPM pairs plus a manifest; returns the manifest path.

    Depth maps alternate between linear ramps (both axes, both directions)
    and radial gradients so the degradation varies spatially.  Everything is
    reproducible from the seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    total = train_count + heldout_count
    for i in range(total):
        radiance = physics.synth_radiance(size, rng)
        kind = i % 4
        lo = float(rng.uniform(depth_range[0], depth_range[0] + 0.3))
        hi = float(rng.uniform(depth_range[1] - 0.3, depth_range[1]))
        if kind == 0:
            depth = physics.depth_ramp(size, lo, hi, axis=1)
        elif kind == 1:
            depth = physics.depth_ramp(size, lo, hi, axis=0)
        elif kind == 2:
            depth = physics.depth_ramp(size, hi, lo, axis=1)
        else:
            depth = physics.depth_radial(size, lo, hi)
        scene = physics.SceneModel(radiance, depth, np.asarray(eta),
                                   np.asarray(ambient), fs_gain=fs_gain)
        degraded = physics.degrade(scene).total
        clean_path = os.path.join(out_dir, f"clean_{i:03d}.ppm")
        raw_path = os.path.join(out_dir, f"raw_{i:03d}.ppm")
        write_ppm(clean_path, radiance)
        write_ppm(raw_path, degraded)
        split = "train" if i < train_count else "val"
        entries.append(ManifestEntry(raw=raw_path, reference=clean_path, split=split))
    manifest_path = os.path.join(out_dir, "manifest.txt")
    save_manifest(manifest_path, entries)
    return manifest_path
