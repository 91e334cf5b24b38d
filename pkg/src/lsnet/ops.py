"""Differentiable operations for the enhancement network.

Every op returns a new Tensor wired into the autograd graph.  Convolutions
use stride-tricks windows plus einsum, which keeps forward and backward
deterministic (fixed summation order).
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, _attach, _make


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> view (B, C, H-k+1, W-k+1, k, k) of sliding kxk windows."""
    b, c, h, w = x.shape
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, h - k + 1, w - k + 1, k, k), (sb, sc, sh, sw, sh, sw), writeable=False
    )


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded stride-1 convolution with a 1x1 or 3x3 kernel.

    w: (out_ch, in_ch, k, k), b: (out_ch,).  Differentiable w.r.t. all three.
    """
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ShapeError(f"conv2d: weight must be (out, in, k, k), got {w.data.shape}")
    k = w.data.shape[2]
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1 or 3, got {k}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (B, C, H, W), got {x.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.data.shape[1]} channels, weight expects {w.data.shape[1]}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} vs out_ch {w.data.shape[0]}")

    if k == 1:
        w2 = w.data[:, :, 0, 0]
        y = np.einsum("oi,bihw->bohw", w2, x.data, optimize=True)
    else:
        xp = _pad_spatial(x.data, 1)
        y = np.einsum("bihwkl,oikl->bohw", _windows(xp, 3), w.data, optimize=True)
    y += b.data[None, :, None, None]
    out = _make(y, (x, w, b))

    def bw(g):
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if k == 1:
            if w.requires_grad:
                dw = np.einsum("bohw,bihw->oi", g, x.data, optimize=True)
                w._accumulate(dw[:, :, None, None])
            if x.requires_grad:
                x._accumulate(np.einsum("oi,bohw->bihw", w.data[:, :, 0, 0], g, optimize=True))
        else:
            if w.requires_grad:
                xp = _pad_spatial(x.data, 1)
                w._accumulate(np.einsum("bihwkl,bohw->oikl", _windows(xp, 3), g, optimize=True))
            if x.requires_grad:
                gp = _pad_spatial(g, 1)
                w_rot = w.data[:, :, ::-1, ::-1]
                x._accumulate(
                    np.einsum("bohwkl,oikl->bihw", _windows(gp, 3), w_rot, optimize=True)
                )

    return _attach(out, bw)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel same-padded 3x3 convolution.  w: (C, k, k), b: (C,)."""
    if w.data.ndim != 3 or w.data.shape[1] != w.data.shape[2]:
        raise ShapeError(f"depthwise_conv2d: weight must be (C, k, k), got {w.data.shape}")
    k = w.data.shape[1]
    if k != 3:
        raise ShapeError(f"depthwise_conv2d: kernel must be 3, got {k}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"depthwise_conv2d: {x.data.shape[1]} channels vs weight {w.data.shape[0]}"
        )
    xp = _pad_spatial(x.data, 1)
    y = np.einsum("bchwkl,ckl->bchw", _windows(xp, 3), w.data, optimize=True)
    y += b.data[None, :, None, None]
    out = _make(y, (x, w, b))

    def bw(g):
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            xp_ = _pad_spatial(x.data, 1)
            w._accumulate(np.einsum("bchwkl,bchw->ckl", _windows(xp_, 3), g, optimize=True))
        if x.requires_grad:
            gp = _pad_spatial(g, 1)
            w_rot = w.data[:, ::-1, ::-1]
            x._accumulate(np.einsum("bchwkl,ckl->bchw", _windows(gp, 3), w_rot, optimize=True))

    return _attach(out, bw)


class BatchNormState:
    """Running statistics for one batch-norm site (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    Train mode uses batch statistics and advances the running averages by
    exponential moving average; eval mode uses the stored running statistics.
    Variance is floored by eps, so a constant channel maps to beta exactly.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: input must be 4-d, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    if n == 0:
        raise ShapeError("batch_norm: zero elements per channel")
    dt = x.data.dtype

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean.astype(np.float64)
        unbias = n / max(n - 1, 1)
        state.running_var = (1.0 - m) * state.running_var + m * (
            var.astype(np.float64) * unbias
        )
    else:
        mean = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)

    ivar = 1.0 / np.sqrt(var + dt.type(state.eps))
    ivar = ivar.astype(dt)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _make(y, (x, gamma, beta))

    def bw(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                s1 = gx.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
                inv_n = dt.type(1.0 / n)
                dx = ivar[None, :, None, None] * (gx - inv_n * s1 - xhat * (inv_n * s2))
            else:
                dx = gx * ivar[None, :, None, None]
            x._accumulate(dx)

    return _attach(out, bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Smooth nonlinearity (tanh-form GELU)."""
    dt = x.data.dtype
    c, a = dt.type(_GELU_C), dt.type(_GELU_A)
    half = dt.type(0.5)
    u = c * (x.data + a * x.data ** 3)
    t = np.tanh(u)
    y = half * x.data * (1.0 + t)
    out = _make(y.astype(dt, copy=False), (x,))

    def bw(g):
        if x.requires_grad:
            du = c * (1.0 + 3.0 * a * x.data ** 2)
            dy = half * (1.0 + t) + half * x.data * (1.0 - t * t) * du
            x._accumulate((g * dy).astype(dt, copy=False))

    return _attach(out, bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y.astype(x.data.dtype, copy=False), (x,))

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate((y * (g - dot)).astype(x.data.dtype, copy=False))

    return _attach(out, bw)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """(batch, m, k) @ (batch, k, n) -> (batch, m, n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(
            f"batched_matmul: need 3-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"batched_matmul: {a.data.shape} incompatible with {b.data.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, b.data.transpose(0, 2, 1)))
        if b.requires_grad:
            b._accumulate(np.matmul(a.data.transpose(0, 2, 1), g))

    return _attach(out, bw)


def region_mean(x: Tensor, grid: tuple) -> Tensor:
    """Mean feature vector of each grid region: (B, C, H, W) -> (B, R, C).

    Regions are the non-overlapping blocks of a rows x cols partition, in
    row-major order.  Gradient spreads uniformly over region members.
    """
    gr, gc = grid
    b, c, h, w = x.data.shape
    if h % gr or w % gc:
        raise ShapeError(f"region_mean: extents ({h}, {w}) not divisible by grid {grid}")
    bh, bw_ = h // gr, w // gc
    blocks = x.data.reshape(b, c, gr, bh, gc, bw_)
    means = blocks.mean(axis=(3, 5))                       # (B, C, gr, gc)
    out_data = np.ascontiguousarray(means.transpose(0, 2, 3, 1).reshape(b, gr * gc, c))
    out = _make(out_data, (x,))

    def bw(g):
        if x.requires_grad:
            per = x.data.dtype.type(1.0 / (bh * bw_))
            gb = g.reshape(b, gr, gc, c).transpose(0, 3, 1, 2) * per
            spread = np.broadcast_to(
                gb[:, :, :, None, :, None], (b, c, gr, bh, gc, bw_)
            ).reshape(b, c, h, w)
            x._accumulate(np.ascontiguousarray(spread))

    return _attach(out, bw)


def topk_lastdim(scores, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties broken by lower index.

    Accepts a Tensor or ndarray; returns a detached int index array (the
    selection itself carries no gradient).
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n = data.shape[-1]
    if not 1 <= k <= n:
        raise ShapeError(f"topk_lastdim: k={k} out of range for last dim {n}")
    # stable sort on the negated scores keeps the lower index first on ties
    return np.argsort(-data, axis=-1, kind="stable")[..., :k]


def gather_regions(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select regions of a region-major tensor by index.

    x: (G, R, ...) with any trailing feature axes; idx: (G, Rq, k) integer
    array.  Returns (G, Rq, k, ...); the backward pass scatter-adds, so a
    region gathered twice accumulates gradient twice.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"gather_regions: need at least (G, R), got {x.data.shape}")
    g_, r = x.data.shape[0], x.data.shape[1]
    idx = np.asarray(idx)
    if idx.ndim != 3 or idx.shape[0] != g_:
        raise ShapeError(f"gather_regions: index shape {idx.shape} vs input {x.data.shape}")
    if idx.min() < 0 or idx.max() >= r:
        raise IndexError(f"gather_regions: index out of range [0, {r})")
    gsel = np.arange(g_)[:, None, None]
    out = _make(np.ascontiguousarray(x.data[gsel, idx]), (x,))

    def bw(grad):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (gsel, idx), grad)
            x._accumulate(dx)

    return _attach(out, bw)


def to_batch(x: Tensor, grid: tuple) -> Tensor:
    """Move every channel map's grid blocks into the batch axis.

    (N, C, H, W) -> (N*C*R, 1, H/rows, W/cols) with R = rows*cols.  Entries
    are ordered channel-major, then image, then block row-major:
    index = (c*N + n)*R + r, so one channel's entries form a contiguous
    slice.  Exact inverse: from_batch.
    """
    gr, gc = grid
    n, c, h, w = x.data.shape
    if h % gr or w % gc:
        raise ShapeError(f"to_batch: extents ({h}, {w}) not divisible by grid {grid}")
    bh, bw_ = h // gr, w // gc
    y = (
        x.data.transpose(1, 0, 2, 3)
        .reshape(c, n, gr, bh, gc, bw_)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(c * n * gr * gc, 1, bh, bw_)
    )
    out = _make(np.ascontiguousarray(y), (x,))

    def bw(g):
        if x.requires_grad:
            gx = (
                g.reshape(c, n, gr, gc, bh, bw_)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(c, n, h, w)
                .transpose(1, 0, 2, 3)
            )
            x._accumulate(np.ascontiguousarray(gx))

    return _attach(out, bw)


def from_batch(x: Tensor, grid: tuple, channels: int) -> Tensor:
    """Exact inverse of to_batch: (N*C*R, 1, bh, bw) -> (N, C, H, W)."""
    gr, gc = grid
    total, one, bh, bw_ = x.data.shape
    if one != 1:
        raise ShapeError(f"from_batch: expected single-channel entries, got {one}")
    r = gr * gc
    if total % (channels * r):
        raise ShapeError(f"from_batch: batch {total} not divisible by C*R = {channels * r}")
    n = total // (channels * r)
    y = (
        x.data.reshape(channels, n, gr, gc, bh, bw_)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(channels, n, gr * bh, gc * bw_)
        .transpose(1, 0, 2, 3)
    )
    out = _make(np.ascontiguousarray(y), (x,))

    def bw(g):
        if x.requires_grad:
            gx = (
                g.transpose(1, 0, 2, 3)
                .reshape(channels, n, gr, bh, gc, bw_)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(total, 1, bh, bw_)
            )
            x._accumulate(np.ascontiguousarray(gx))

    return _attach(out, bw)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient at exact ties is 0."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1_loss: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = _make(np.abs(diff).mean(dtype=pred.data.dtype).reshape(1), (pred, target))
    n = pred.data.dtype.type(pred.data.size)

    def bw(g):
        s = np.sign(diff) * (g.reshape(()) / n)
        if pred.requires_grad:
            pred._accumulate(s.astype(pred.data.dtype, copy=False))
        if target.requires_grad:
            target._accumulate((-s).astype(target.data.dtype, copy=False))

    return _attach(out, bw)
