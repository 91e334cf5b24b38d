"""Underwater image formation model and the dark-channel-prior restorer.

The forward simulator composes direct illumination, backscatter and an
optional forward-scatter blur into a degraded image from a scene
description (clean radiance, depth map, per-channel attenuation, ambient
light).  The DCP functions invert the same model from the image alone and
serve as a classical baseline and oracle.

All arrays are float64 channel-first: images (3, H, W), depth (H, W).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SceneModel:
    """Scene description for the forward simulator.

    transmission t = exp(-eta * d) stays in (0, 1] because eta, d >= 0.
    """

    radiance: np.ndarray          # clean image J in [0, 1], (3, H, W)
    depth: np.ndarray             # meters, >= 0, (H, W)
    eta: np.ndarray               # per-channel attenuation 1/m, >= 0, (3,)
    ambient: np.ndarray           # per-channel ambient light in [0, 1], (3,)
    fs_gain: float = 0.0          # forward-scatter strength (0 = neglected)
    fs_sigma_per_meter: float = 0.5

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.eta = np.asarray(self.eta, dtype=np.float64).reshape(3)
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        if self.radiance.ndim != 3 or self.radiance.shape[0] != 3:
            raise ValueError(f"radiance must be (3, H, W), got {self.radiance.shape}")
        if self.depth.shape != self.radiance.shape[1:]:
            raise ValueError("depth map must match radiance spatial extents")
        if (self.eta < 0).any() or (self.depth < 0).any():
            raise ValueError("attenuation and depth must be non-negative")
        for arr in (self.radiance, self.depth, self.eta, self.ambient):
            if not np.isfinite(arr).all():
                raise ValueError("scene fields must be finite")

    def transmission(self) -> np.ndarray:
        """Per-channel transmission t = exp(-eta * d), shape (3, H, W)."""
        return np.exp(-self.eta[:, None, None] * self.depth[None, :, :])


@dataclass
class DegradationComponents:
    direct: np.ndarray
    forward_scatter: np.ndarray
    backscatter: np.ndarray
    total: np.ndarray


@dataclass
class TransmissionMap:
    values: np.ndarray            # (H, W) in [0, 1]
    patch_radius: int


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected edges, per channel."""
    if sigma <= 0:
        return image.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()

    def convolve_axis(arr, axis):
        padded = np.pad(arr, [(radius, radius) if a == axis else (0, 0)
                              for a in range(arr.ndim)], mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
        return np.tensordot(win, kernel, axes=([-1], [0]))

    out = convolve_axis(image, image.ndim - 2)
    return convolve_axis(out, image.ndim - 1)


def degrade(scene: SceneModel) -> DegradationComponents:
    """Simulate the medium: direct + forward scatter + backscatter.

    direct = J * exp(-eta d); backscatter = A * (1 - exp(-eta d));
    forward scatter = fs_gain * blur(direct), disabled by default.
    """
    t = scene.transmission()
    direct = scene.radiance * t
    backscatter = scene.ambient[:, None, None] * (1.0 - t)
    if scene.fs_gain > 0.0:
        sigma = scene.fs_sigma_per_meter * float(scene.depth.mean())
        forward = scene.fs_gain * gaussian_blur(direct, sigma)
    else:
        forward = np.zeros_like(direct)
    total = direct + forward + backscatter
    return DegradationComponents(direct, forward, backscatter, total)


def _min_filter(channel_min: np.ndarray, radius: int) -> np.ndarray:
    """Separable min filter over a (2r+1)^2 window, edges replicated."""
    if radius == 0:
        return channel_min.copy()
    size = 2 * radius + 1
    out = np.pad(channel_min, ((radius, radius), (0, 0)), mode="edge")
    out = np.lib.stride_tricks.sliding_window_view(out, size, axis=0).min(axis=-1)
    out = np.pad(out, ((0, 0), (radius, radius)), mode="edge")
    return np.lib.stride_tricks.sliding_window_view(out, size, axis=1).min(axis=-1)


def dark_channel(image: np.ndarray, patch_radius: int = 7) -> np.ndarray:
    """Min over channels then min over the neighborhood window."""
    if patch_radius < 0:
        raise ValueError("patch_radius must be >= 0")
    return _min_filter(image.min(axis=0), patch_radius)


def estimate_airlight(image: np.ndarray, patch_radius: int = 7) -> np.ndarray:
    """Ambient light from the brightest of the top 0.1% dark-channel pixels."""
    dark = dark_channel(image, patch_radius)
    flat = dark.ravel()
    count = max(1, int(0.001 * flat.size))
    candidates = np.argsort(-flat, kind="stable")[:count]
    sums = image.reshape(3, -1)[:, candidates].sum(axis=0)
    best = candidates[int(np.argmax(sums))]
    return image.reshape(3, -1)[:, best].copy()


def estimate_transmission(image: np.ndarray, ambient: np.ndarray,
                          patch_radius: int = 7, omega: float = 0.95) -> TransmissionMap:
    """Dark-channel transmission estimate t = 1 - omega * dark(I / A)."""
    ambient = np.asarray(ambient, dtype=np.float64).reshape(3)
    if (ambient <= 0).any():
        raise ValueError("ambient light must be positive per channel")
    ratio = image / ambient[:, None, None]
    t = 1.0 - omega * dark_channel(ratio, patch_radius)
    return TransmissionMap(np.clip(t, 0.0, 1.0), patch_radius)


def dcp_recover(image: np.ndarray, ambient: np.ndarray, transmission: np.ndarray,
                t_floor: float = 0.1, clip: bool = True) -> np.ndarray:
    """Invert the formation model: J = (I - A) / max(t, t0) + A."""
    if not 0.0 < t_floor <= 1.0:
        raise ValueError("t_floor must be in (0, 1]")
    ambient = np.asarray(ambient, dtype=np.float64).reshape(3)
    t = np.maximum(np.asarray(transmission, dtype=np.float64), t_floor)
    recovered = (image - ambient[:, None, None]) / t[None, :, :] + ambient[:, None, None]
    if clip:
        recovered = np.clip(recovered, 0.0, 1.0)
    return recovered


def dcp_enhance(image: np.ndarray, patch_radius: int = 7, omega: float = 0.95,
                t_floor: float = 0.1) -> np.ndarray:
    """Full classical pipeline: estimate A and t from the image, then recover."""
    ambient = estimate_airlight(image, patch_radius)
    t = estimate_transmission(image, ambient, patch_radius, omega)
    return dcp_recover(image, ambient, t.values, t_floor)


def depth_ramp(shape: tuple, d_min: float, d_max: float, axis: int = 1) -> np.ndarray:
    """Linear depth ramp along rows (axis=0) or columns (axis=1)."""
    h, w = shape
    n = h if axis == 0 else w
    line = np.linspace(d_min, d_max, n)
    return np.tile(line[:, None], (1, w)) if axis == 0 else np.tile(line[None, :], (h, 1))


def depth_radial(shape: tuple, d_min: float, d_max: float) -> np.ndarray:
    """Radial depth gradient: nearest at the center, deepest at the corners."""
    h, w = shape
    ys = (np.arange(h) - (h - 1) / 2.0) / max(h - 1, 1)
    xs = (np.arange(w) - (w - 1) / 2.0) / max(w - 1, 1)
    rad = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2)
    rad /= rad.max() if rad.max() > 0 else 1.0
    return d_min + (d_max - d_min) * rad


def synth_radiance(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Structured random clean image: smooth color fields, blocks and texture.

    A few dark and bright rectangles guarantee edges plus near-zero pixels
    in every patch, which the dark-channel prior relies on.
    """
    h, w = shape
    coarse = rng.uniform(0.15, 0.9, size=(3, 4, 4))
    ys = np.linspace(0, 3, h)
    xs = np.linspace(0, 3, w)
    y0 = np.clip(ys.astype(int), 0, 2)
    x0 = np.clip(xs.astype(int), 0, 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    img = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
           + c10 * fy * (1 - fx) + c11 * fy * fx)
    for _ in range(6):
        by = rng.integers(0, max(h - 4, 1))
        bx = rng.integers(0, max(w - 4, 1))
        bh = int(rng.integers(3, max(h // 3, 4)))
        bw = int(rng.integers(3, max(w // 3, 4)))
        shade = rng.uniform(0.0, 1.0, size=3)
        img[:, by:by + bh, bx:bx + bw] = shade[:, None, None]
    img[:, ::7, :] *= 0.35           # thin dark scanlines seed the dark channel
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)
