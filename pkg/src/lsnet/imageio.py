"""Image file I/O: binary PPM (P6) natively, PNG via Pillow.

In-memory format is float64 (3, H, W) in [0, 1].
"""
from __future__ import annotations

import numpy as np


class DataError(Exception):
    """Unreadable or inconsistent input data."""


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        ch = blob[i:i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    i += 1  # single whitespace byte after maxval
    raw = blob[i:i + w * h * 3]
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated PPM pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path: str, image: np.ndarray) -> None:
    arr = _to_uint8(image).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_image(path: str) -> np.ndarray:
    """Decode a PPM or PNG file to float64 (3, H, W) in [0, 1]."""
    p = str(path)
    if p.lower().endswith(".ppm"):
        return read_ppm(p)
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataError(f"{p}: Pillow required for non-PPM formats") from exc
    try:
        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"{p}: file not found")
    except Exception as exc:
        raise DataError(f"{p}: cannot decode image ({exc})") from exc
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_image(path: str, image: np.ndarray) -> None:
    """Encode float (3, H, W) in [0, 1]; format chosen by extension."""
    p = str(path)
    if p.lower().endswith(".ppm"):
        write_ppm(p, image)
        return
    from PIL import Image
    Image.fromarray(_to_uint8(image).transpose(1, 2, 0)).save(p)


def resize_chw(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of (C, H, W) to (C, h, w) with edge-aligned sampling."""
    c, h, w = image.shape
    th, tw = size
    if (h, w) == (th, tw):
        return image.copy()
    ys = np.linspace(0, h - 1, th)
    xs = np.linspace(0, w - 1, tw)
    y0 = np.clip(ys.astype(int), 0, h - 2) if h > 1 else np.zeros(th, int)
    x0 = np.clip(xs.astype(int), 0, w - 2) if w > 1 else np.zeros(tw, int)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    c00 = image[:, y0][:, :, x0]
    c01 = image[:, y0][:, :, x1]
    c10 = image[:, y1][:, :, x0]
    c11 = image[:, y1][:, :, x1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)
