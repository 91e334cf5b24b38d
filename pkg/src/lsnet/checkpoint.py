"""Binary checkpoint format.

Little-endian layout:

    magic "LSNT" | version u32 | training step u64
    config blob: u32 length + UTF-8 "key = value" lines
    tensor table: u32 count, then per tensor
        u32 name length | name UTF-8 | u32 ndim | u32 dims... | raw f32 data
    optimizer flag u8; if 1:
        lr f64 | beta1 f64 | beta2 f64 | eps f64 | step u64 | tensor table

Tensors are written in a fixed order (parameters in creation order, then
batch-norm running stats), so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .imageio import DataError
from .model import LSNetConfig, LSNetParams, init_params
from .optim import Adam

MAGIC = b"LSNT"
VERSION = 1


def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError("checkpoint truncated")
    return data


def _read_blob(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def _write_tensor_table(fh, table: dict) -> None:
    fh.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        _write_blob(fh, name.encode("utf-8"))
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", arr32.ndim))
        fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        fh.write(arr32.tobytes())


def _read_tensor_table(fh) -> dict:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    table = {}
    for _ in range(count):
        name = _read_blob(fh).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        numel = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(fh, 4 * numel), dtype="<f4").reshape(shape)
        table[name] = data.copy()
    return table


def _config_blob(config: LSNetConfig) -> bytes:
    lines = [f"{k} = {v}" for k, v in sorted(config.to_dict().items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_blob(blob: bytes) -> LSNetConfig:
    d = {}
    for line in blob.decode("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        d[key.strip()] = value.strip()
    return LSNetConfig.from_dict(d)


def _stat_table(params: LSNetParams) -> dict:
    table = {name: t.data for name, t in params.tensors.items()}
    for site, state in params.bn.items():
        table[f"{site}.running_mean"] = state.running_mean
        table[f"{site}.running_var"] = state.running_var
    return table


def save_checkpoint(path: str, params: LSNetParams, step: int = 0,
                    optimizer: Adam | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", step))
    _write_blob(buf, _config_blob(params.config))
    _write_tensor_table(buf, _stat_table(params))
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<4d", optimizer.lr, optimizer.beta1,
                              optimizer.beta2, optimizer.eps))
        buf.write(struct.pack("<Q", optimizer.step_count))
        _write_tensor_table(buf, optimizer.state_tensors())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str):
    """Returns (params, step, optimizer_state | None).

    optimizer_state is a dict with keys lr, beta1, beta2, eps, step, tensors.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        config = _parse_config_blob(_read_blob(fh))
        table = _read_tensor_table(fh)
        params = init_params(config, seed=0)
        for name, tensor in params.tensors.items():
            if name not in table:
                raise DataError(f"{path}: checkpoint missing tensor {name}")
            if tuple(table[name].shape) != tensor.data.shape:
                raise DataError(
                    f"{path}: tensor {name} shape {table[name].shape} "
                    f"!= expected {tensor.data.shape}")
            tensor.data = table[name].astype(tensor.data.dtype)
        for site, state in params.bn.items():
            state.running_mean = table[f"{site}.running_mean"].astype(np.float64)
            state.running_var = table[f"{site}.running_var"].astype(np.float64)
        (opt_flag,) = struct.unpack("<B", _read_exact(fh, 1))
        opt_state = None
        if opt_flag:
            lr, b1, b2, eps = struct.unpack("<4d", _read_exact(fh, 32))
            (opt_step,) = struct.unpack("<Q", _read_exact(fh, 8))
            opt_state = {"lr": lr, "beta1": b1, "beta2": b2, "eps": eps,
                         "step": opt_step, "tensors": _read_tensor_table(fh)}
    return params, step, opt_state
