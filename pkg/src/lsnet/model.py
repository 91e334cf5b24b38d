"""The lightweight selective-attention enhancement network.

Structure: a shared 3x3 positional convolution over the color channels, a
channel-to-batch rearrangement of the grid blocks, two parallel branches
(compensation and over-exposure attenuation) built from pointwise
convolutions and top-k region attention, and the residual combine
J = I + dx - ox.

Each branch lifts the single-channel entries to ``lift_channels`` features,
projects queries/keys/values with a pointwise conv + batch norm + activation
per color map (red, green and blue degrade differently, so the projections
are not shared across colors), routes each region to its top-k most affine
regions, runs scaled dot-product attention over the gathered tokens, adds a
depthwise 3x3 local-enhancement term, projects, and merges with the lifted
features before a single-channel head.  No MLP block follows the attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, concat, default_dtype

ABLATION_FLAGS = ("no_x", "no_dx", "no_ox", "no_topk")
COLORS = 3


@dataclass(frozen=True)
class LSNetConfig:
    lift_channels: int = 16
    region_rows: int = 2
    region_cols: int = 2
    topk: int = 2
    ablation: frozenset = frozenset()
    input_size: tuple = (256, 256)

    def __post_init__(self):
        if self.lift_channels < 1:
            raise ValueError("lift_channels must be >= 1")
        r = self.region_rows * self.region_cols
        if not 1 <= self.topk <= r:
            raise ValueError(f"topk={self.topk} out of range for {r} regions")
        bad = set(self.ablation) - set(ABLATION_FLAGS)
        if bad:
            raise ValueError(f"unknown ablation flags: {sorted(bad)}")

    @property
    def grid(self) -> tuple:
        return (self.region_rows, self.region_cols)

    @property
    def regions(self) -> int:
        return self.region_rows * self.region_cols

    def branches(self) -> list:
        out = []
        if "no_dx" not in self.ablation:
            out.append("dx")
        if "no_ox" not in self.ablation:
            out.append("ox")
        return out

    def to_dict(self) -> dict:
        return {
            "lift_channels": str(self.lift_channels),
            "region_rows": str(self.region_rows),
            "region_cols": str(self.region_cols),
            "topk": str(self.topk),
            "ablation": ",".join(sorted(self.ablation)),
            "input_size": f"{self.input_size[0]}x{self.input_size[1]}",
        }

    @staticmethod
    def from_dict(d: dict) -> "LSNetConfig":
        abl = frozenset(f for f in d.get("ablation", "").split(",") if f)
        h, w = d.get("input_size", "256x256").split("x")
        return LSNetConfig(
            lift_channels=int(d.get("lift_channels", 16)),
            region_rows=int(d.get("region_rows", 2)),
            region_cols=int(d.get("region_cols", 2)),
            topk=int(d.get("topk", 2)),
            ablation=abl,
            input_size=(int(h), int(w)),
        )


@dataclass
class RoutingIndex:
    """Coarse routing result: region affinities and top-k neighbor ids."""

    affinity: np.ndarray     # (groups, regions, regions)
    index: np.ndarray        # (groups, regions, k) int
    regions: int


@dataclass
class Decomposition:
    """Forward output: compensation, over-exposure attenuation, and J."""

    dx: Tensor
    ox: Tensor
    output: Tensor

    def clamped(self) -> np.ndarray:
        """Display view of J, confined to [0, 1]; the loss path never clamps."""
        return np.clip(self.output.data, 0.0, 1.0)


class LSNetParams:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, config: LSNetConfig, tensors: dict, bn: dict):
        self.config = config
        self.tensors = tensors
        self.bn = bn

    def trainable(self) -> dict:
        return self.tensors

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


def _uniform(rng, shape, fan_in, name):
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(default_dtype()), requires_grad=True, name=name)


def init_params(config: LSNetConfig, seed: int = 0) -> LSNetParams:
    """Fan-in-scaled uniform init, reproducible from the seed.

    Batch-norm gains start at 1 and shifts at 0; running stats at (0, 1).
    Parameter creation order is fixed, so one seed gives one byte stream.
    """
    rng = np.random.default_rng(seed)
    c = config.lift_channels
    tensors: dict[str, Tensor] = {}
    bn: dict[str, ops.BatchNormState] = {}

    def conv(name, out_ch, in_ch, k):
        fan = in_ch * k * k
        tensors[f"{name}.w"] = _uniform(rng, (out_ch, in_ch, k, k), fan, f"{name}.w")
        tensors[f"{name}.b"] = _uniform(rng, (out_ch,), fan, f"{name}.b")

    conv("pos", COLORS, COLORS, 3)
    for branch in config.branches():
        conv(f"{branch}.lift", c, 1, 1)
        if "no_topk" not in config.ablation:
            for color in range(COLORS):
                for proj in ("q", "k", "v"):
                    site = f"{branch}.c{color}.{proj}"
                    conv(site, c, c, 1)
                    tensors[f"{site}.gamma"] = Tensor(
                        np.ones(c, dtype=default_dtype()), True, f"{site}.gamma")
                    tensors[f"{site}.beta"] = Tensor(
                        np.zeros(c, dtype=default_dtype()), True, f"{site}.beta")
                    bn[site] = ops.BatchNormState(c)
            fan = c * 9
            tensors[f"{branch}.lepe.w"] = _uniform(rng, (c, 3, 3), fan, f"{branch}.lepe.w")
            tensors[f"{branch}.lepe.b"] = _uniform(rng, (c,), fan, f"{branch}.lepe.b")
            conv(f"{branch}.proj", c, c, 1)
            conv(f"{branch}.merge", c, 2 * c, 1)
        else:
            conv(f"{branch}.merge", c, c, 1)
        conv(f"{branch}.head", 1, c, 1)
    return LSNetParams(config, tensors, bn)


def param_count(params: LSNetParams) -> tuple[int, dict]:
    """Exact trainable scalar count plus a per-group ledger."""
    ledger: dict[str, int] = {}
    for name, t in params.tensors.items():
        parts = name.split(".")
        if parts[0] == "pos":
            group = "pos_conv"
        elif parts[1].startswith("c") and len(parts) == 4:
            group = f"{parts[0]}.qkv"
        else:
            group = f"{parts[0]}.{parts[1]}"
        ledger[group] = ledger.get(group, 0) + int(t.data.size)
    return sum(ledger.values()), ledger


def positional_encode(image: Tensor, params: LSNetParams) -> Tensor:
    """3x3 conv across the color channels followed by the activation.

    This is the only cross-channel interaction before the final combine;
    the three resulting single-channel maps are peeled apart by to_batch.
    """
    if image.data.ndim != 4 or image.data.shape[1] != COLORS:
        raise ShapeError(f"positional_encode: expected (N, 3, H, W), got {image.data.shape}")
    return ops.gelu(ops.conv2d(image, params.tensors["pos.w"], params.tensors["pos.b"]))


def chunk_channels(x: Tensor) -> list:
    """Split (N, C, H, W) into C single-channel maps (test/inspection helper)."""
    n, c, h, w = x.data.shape
    t = x.transpose(1, 0, 2, 3).reshape(c, n, 1, h, w)
    return [t.slice_batch(i, i + 1).reshape(n, 1, h, w) for i in range(c)]


def qkv_project(lifted: Tensor, params: LSNetParams, branch: str,
                training: bool) -> tuple[Tensor, Tensor, Tensor]:
    """Pointwise conv + batch norm + activation per color map.

    ``lifted`` is in channel-to-batch form, color-major, so each color's
    entries are one contiguous slice of the batch.
    """
    total = lifted.data.shape[0]
    if total % COLORS:
        raise ShapeError(f"qkv_project: batch {total} not divisible by {COLORS}")
    per = total // COLORS
    outs = {"q": [], "k": [], "v": []}
    for color in range(COLORS):
        part = lifted.slice_batch(color * per, (color + 1) * per)
        for proj in ("q", "k", "v"):
            site = f"{branch}.c{color}.{proj}"
            y = ops.conv2d(part, params.tensors[f"{site}.w"], params.tensors[f"{site}.b"])
            y = ops.batch_norm(y, params.tensors[f"{site}.gamma"],
                               params.tensors[f"{site}.beta"], params.bn[site], training)
            outs[proj].append(ops.gelu(y))
    return (concat(outs["q"], axis=0), concat(outs["k"], axis=0), concat(outs["v"], axis=0))


def region_route(q: Tensor, k: Tensor, grid: tuple, topk: int) -> RoutingIndex:
    """Coarse region-to-region routing.

    q and k are channel-to-batch entries where each grid block is one batch
    entry and consecutive runs of rows*cols entries belong to one map.
    Region descriptors are the spatial means; affinity is their outer
    product; the index is detached (selection carries no gradient).
    """
    r = grid[0] * grid[1]
    total, c = q.data.shape[0], q.data.shape[1]
    if total % r:
        raise ShapeError(f"region_route: batch {total} not divisible by {r} regions")
    groups = total // r
    q_r = ops.region_mean(q, (1, 1)).reshape(groups, r, c)
    k_r = ops.region_mean(k, (1, 1)).reshape(groups, r, c)
    affinity = ops.batched_matmul(q_r, k_r.transpose(0, 2, 1))
    index = ops.topk_lastdim(affinity.data, topk)
    return RoutingIndex(affinity=affinity.data.copy(), index=index, regions=r)


def fine_attention(q: Tensor, k: Tensor, v: Tensor, routing: RoutingIndex) -> Tensor:
    """Scaled dot-product attention restricted to each region's top-k regions.

    Inputs are channel-to-batch entries (one region per entry).  Keys and
    values are gathered from the routed regions; softmax runs over the
    gathered-token axis.  With k = region count this equals dense attention
    over the full map.
    """
    r = routing.regions
    total, c, bh, bw = q.data.shape
    groups = total // r
    p = bh * bw
    kk = routing.index.shape[-1]

    def tokens(t):
        return t.reshape(groups, r, c, p).transpose(0, 1, 3, 2)   # (G, R, P, C)

    qt, kt, vt = tokens(q), tokens(k), tokens(v)
    k_sel = ops.gather_regions(kt, routing.index).reshape(groups * r, kk * p, c)
    v_sel = ops.gather_regions(vt, routing.index).reshape(groups * r, kk * p, c)
    qs = qt.reshape(groups * r, p, c)
    scores = ops.batched_matmul(qs, k_sel.transpose(0, 2, 1)).scale(1.0 / math.sqrt(c))
    attn = ops.softmax_lastdim(scores)
    out = ops.batched_matmul(attn, v_sel)                          # (G*R, P, C)
    return out.reshape(groups, r, p, c).transpose(0, 1, 3, 2).reshape(total, c, bh, bw)


def _branch_map(xb: Tensor, params: LSNetParams, branch: str, config: LSNetConfig,
                training: bool) -> Tensor:
    t = params.tensors
    lifted = ops.gelu(ops.conv2d(xb, t[f"{branch}.lift.w"], t[f"{branch}.lift.b"]))
    if "no_topk" in config.ablation:
        merged = ops.gelu(ops.conv2d(lifted, t[f"{branch}.merge.w"], t[f"{branch}.merge.b"]))
    else:
        q, k, v = qkv_project(lifted, params, branch, training)
        routing = region_route(q, k, config.grid, config.topk)
        attended = fine_attention(q, k, v, routing)
        attended = attended + ops.depthwise_conv2d(
            v, t[f"{branch}.lepe.w"], t[f"{branch}.lepe.b"])
        attended = ops.conv2d(attended, t[f"{branch}.proj.w"], t[f"{branch}.proj.b"])
        merged = ops.gelu(ops.conv2d(concat([lifted, attended], axis=1),
                                     t[f"{branch}.merge.w"], t[f"{branch}.merge.b"]))
    head = ops.conv2d(merged, t[f"{branch}.head.w"], t[f"{branch}.head.b"])
    return ops.from_batch(head, config.grid, COLORS)


def forward(image: Tensor, params: LSNetParams, config: LSNetConfig | None = None,
            training: bool = False) -> Decomposition:
    """Run both branches and combine J = I + dx - ox (pre-clamp, exact).

    Ablation flags zero the corresponding term: no_dx / no_ox skip a branch,
    no_x drops the raw image from the sum, no_topk bypasses attention.
    """
    if config is None:
        config = params.config
    n, c, h, w = image.data.shape
    if c != COLORS:
        raise ShapeError(f"forward: expected 3-channel input, got {c}")
    if h % config.region_rows or w % config.region_cols:
        raise ShapeError(
            f"forward: input {h}x{w} not divisible by region grid {config.grid}; "
            "pad to divisibility first (see pad_to_grid)")

    pe = positional_encode(image, params)
    xb = ops.to_batch(pe, config.grid)
    zero = Tensor(np.zeros_like(image.data))
    dx = _branch_map(xb, params, "dx", config, training) if "no_dx" not in config.ablation else zero
    ox = _branch_map(xb, params, "ox", config, training) if "no_ox" not in config.ablation else zero
    if "no_x" in config.ablation:
        combined = dx - ox
    else:
        combined = (image + dx) - ox
    return Decomposition(dx=dx, ox=ox, output=combined)


def pad_to_grid(image: np.ndarray, grid: tuple) -> tuple[np.ndarray, tuple]:
    """Reflect-pad (N, C, H, W) up to grid divisibility; returns (padded, (H, W))."""
    gr, gc = grid
    n, c, h, w = image.shape
    ph = (-h) % gr
    pw = (-w) % gc
    if ph == 0 and pw == 0:
        return image, (h, w)
    if h == 1 and ph or w == 1 and pw:
        mode = "edge"
    else:
        mode = "reflect"
    return np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def crop_to(image: np.ndarray, size: tuple) -> np.ndarray:
    h, w = size
    return image[..., :h, :w]


def flop_report(config: LSNetConfig, hw: tuple = (256, 256)) -> dict:
    """Analytic multiply-accumulate counts for one 3-channel image.

    The headline ``total`` follows the convolutional-MAC convention used by
    module-level counters; attention dot products are reported separately
    under ``attention_macs``.
    """
    h, w = hw
    c = config.lift_channels
    px = COLORS * h * w                      # branch-path pixels across the 3 maps
    report: dict[str, int] = {"pos_conv": h * w * COLORS * COLORS * 9}
    for branch in config.branches():
        report[f"{branch}.lift"] = px * c
        if "no_topk" not in config.ablation:
            report[f"{branch}.qkv"] = px * c * c * 3
            report[f"{branch}.lepe"] = px * c * 9
            report[f"{branch}.proj"] = px * c * c
            report[f"{branch}.merge"] = px * c * 2 * c
        else:
            report[f"{branch}.merge"] = px * c * c
        report[f"{branch}.head"] = px * c
    report["total"] = sum(report.values())

    attn = 0
    if "no_topk" not in config.ablation:
        r = config.regions
        p = (h // config.region_rows) * (w // config.region_cols)
        per_map = r * r * c + 2 * r * p * (config.topk * p) * c
        attn = len(config.branches()) * COLORS * per_map
    report["attention_macs"] = attn
    return report
