"""Image-quality metrics: PSNR, SSIM, UIQM components and UCIQE.

Inputs are float images in [0, 1], channel-first (3, H, W) for color and
(H, W) for grayscale.  Where a metric's published convention is defined on
8-bit data (the colorfulness statistics), values are scaled by 255
internally so scores remain comparable to the usual reported ranges.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)     # ITU-R 601
PSNR_CAP_DB = 100.0                      # sentinel for identical images


@dataclass(frozen=True)
class MetricParams:
    """Published constants of the underwater metrics, centralized and swappable."""

    uicm_alpha: float = 0.1                                   # trimmed-tail fraction
    uicm_mu_weight: float = -0.0268
    uicm_sigma_weight: float = 0.1586
    uiqm_weights: tuple = (0.0282, 0.2953, 3.5753)            # (UICM, UISM, UIConM)
    uism_luma: tuple = LUMA_WEIGHTS
    eme_window: int = 10
    uciqe_weights: tuple = (0.4680, 0.2745, 0.2576)           # (sigma_c, con_l, mu_s)


DEFAULT_PARAMS = MetricParams()


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs report the 100 dB cap."""
    _check_pair(x, y)
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.asarray(image, np.float64)
    r, g, b = LUMA_WEIGHTS
    return r * image[0] + g * image[1] + b * image[2]


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    Color inputs are converted to luma first.  C1 = (0.01 peak)^2 and
    C2 = (0.03 peak)^2, the standard stabilizers.
    """
    _check_pair(np.asarray(x), np.asarray(y))
    gx = to_gray(np.asarray(x, np.float64))
    gy = to_gray(np.asarray(y, np.float64))
    win = 11
    if gx.shape[0] < win or gx.shape[1] < win:
        raise ShapeError(f"ssim: image {gx.shape} smaller than the {win}x{win} window")
    kernel = _gaussian_kernel(win, 1.5)

    def local_mean(a):
        view = np.lib.stride_tricks.sliding_window_view(a, (win, win))
        return np.tensordot(view, kernel, axes=([2, 3], [0, 1]))

    mu_x = local_mean(gx)
    mu_y = local_mean(gy)
    xx = local_mean(gx * gx) - mu_x * mu_x
    yy = local_mean(gy * gy) - mu_y * mu_y
    xy = local_mean(gx * gy) - mu_x * mu_y
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def _trimmed_mean(values: np.ndarray, alpha: float) -> float:
    v = np.sort(values.ravel())
    t = math.ceil(alpha * v.size)
    kept = v[t:v.size - t]
    if kept.size == 0:
        kept = v
    return float(kept.mean())


def _eme(channel: np.ndarray, window: int) -> float:
    """(2 / k1 k2) * sum ln(block max / block min) over whole blocks."""
    h, w = channel.shape
    k2, k1 = h // window, w // window
    if k1 == 0 or k2 == 0:
        return 0.0
    total = 0.0
    for by in range(k2):
        for bx in range(k1):
            block = channel[by * window:(by + 1) * window, bx * window:(bx + 1) * window]
            lo, hi = float(block.min()), float(block.max())
            if lo > 0.0 and hi > 0.0:
                total += math.log(hi / lo)
    return 2.0 / (k1 * k2) * total


def _sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    padded = np.pad(channel, 1, mode="reflect")
    view = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = np.tensordot(view, kx, axes=([2, 3], [0, 1]))
    gy = np.tensordot(view, kx.T, axes=([2, 3], [0, 1]))
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag * (255.0 / peak)
    return mag


def uiqm_components(image: np.ndarray, params: MetricParams = DEFAULT_PARAMS) -> dict:
    """Colorfulness (UICM), sharpness (UISM), contrast (UIConM) and UIQM.

    UICM uses asymmetric alpha-trimmed statistics of the RG and YB opponent
    channels on the 8-bit scale; UISM is the luma-weighted EME of the
    Sobel-weighted channels; UIConM is the block logAMEE of the color image.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"uiqm expects a color image (3, H, W), got {image.shape}")
    img = np.asarray(image, np.float64) * 255.0
    r, g, b = img[0], img[1], img[2]

    rg = r - g
    yb = (r + g) / 2.0 - b
    mu_rg = _trimmed_mean(rg, params.uicm_alpha)
    mu_yb = _trimmed_mean(yb, params.uicm_alpha)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    uicm = (params.uicm_mu_weight * math.sqrt(mu_rg ** 2 + mu_yb ** 2)
            + params.uicm_sigma_weight * math.sqrt(var_rg + var_yb))

    uism = 0.0
    for weight, channel in zip(params.uism_luma, (r, g, b)):
        edges = _sobel_magnitude(channel) * channel
        uism += weight * _eme(edges, params.eme_window)

    win = params.eme_window
    h, w = img.shape[1:]
    k2, k1 = h // win, w // win
    uiconm = 0.0
    if k1 > 0 and k2 > 0:
        acc = 0.0
        for by in range(k2):
            for bx in range(k1):
                block = img[:, by * win:(by + 1) * win, bx * win:(bx + 1) * win]
                lo, hi = float(block.min()), float(block.max())
                top, bot = hi - lo, hi + lo
                if top > 0.0 and bot > 0.0:
                    ratio = top / bot
                    acc += ratio * math.log(ratio)
        uiconm = -acc / (k1 * k2)

    w1, w2, w3 = params.uiqm_weights
    return {
        "uicm": uicm,
        "uism": uism,
        "uiconm": uiconm,
        "uiqm": w1 * uicm + w2 * uism + w3 * uiconm,
    }


# sRGB -> XYZ (D65); the white point is defined as the row sums so that
# neutral inputs map to exactly zero chroma.
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = _RGB2XYZ.sum(axis=1)


def _srgb_to_lab(image: np.ndarray) -> tuple:
    srgb = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    linear = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_RGB2XYZ, linear, axes=([1], [0]))
    ratio = xyz / _WHITE[:, None, None]
    eps = (6.0 / 29.0) ** 3
    f = np.where(ratio > eps, np.cbrt(ratio), ratio / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lum = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return lum, a, b


def uciqe(image: np.ndarray, params: MetricParams = DEFAULT_PARAMS) -> float:
    """Weighted chroma deviation + luminance contrast + mean saturation.

    Works in CIELab scaled to [0, 1]: sigma_c is the population std of
    chroma, contrast is the 99th minus 1st percentile of L, saturation is
    chroma / sqrt(chroma^2 + L^2) per pixel (0 where both vanish).
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"uciqe expects a color image (3, H, W), got {image.shape}")
    lum, a, b = _srgb_to_lab(image)
    lum_n = lum / 100.0
    chroma = np.sqrt(a * a + b * b) / 100.0
    sigma_c = float(chroma.std())
    con_l = float(np.percentile(lum_n, 99) - np.percentile(lum_n, 1))
    denom = np.sqrt(chroma * chroma + lum_n * lum_n)
    sat = np.divide(chroma, denom, out=np.zeros_like(chroma), where=denom > 0)
    mu_s = float(sat.mean())
    w1, w2, w3 = params.uciqe_weights
    return w1 * sigma_c + w2 * con_l + w3 * mu_s


CSV_COLUMNS = ("psnr", "ssim", "uiqm", "uicm", "uism", "uciqe")


@dataclass
class MetricsReport:
    """Per-image metric records plus aggregate means."""

    records: list = field(default_factory=list)

    def add(self, name: str, **values) -> None:
        self.records.append({"name": name, **values})

    def mean(self, key: str):
        vals = [r[key] for r in self.records if r.get(key) is not None]
        if not vals:
            return None
        return float(np.mean(vals))

    def aggregates(self) -> dict:
        return {k: self.mean(k) for k in ("psnr", "ssim", "uiqm", "uicm",
                                          "uism", "uiconm", "uciqe")}

    def to_csv(self) -> str:
        """Comma-separated table in the standard column order, means last."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("name",) + CSV_COLUMNS)
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        for rec in self.records:
            writer.writerow([rec["name"]] + [fmt(rec.get(c)) for c in CSV_COLUMNS])
        writer.writerow(["mean"] + [fmt(self.mean(c)) for c in CSV_COLUMNS])
        return buf.getvalue()


def score_image(image: np.ndarray, reference: np.ndarray | None = None,
                params: MetricParams = DEFAULT_PARAMS) -> dict:
    """All metrics for one image; PSNR/SSIM only when a reference is given."""
    rec: dict = {}
    if reference is not None:
        rec["psnr"] = psnr(image, reference)
        rec["ssim"] = ssim(image, reference)
    rec.update(uiqm_components(image, params))
    rec["uciqe"] = uciqe(image, params)
    return rec
