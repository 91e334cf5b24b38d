"""Adam optimizer over named parameter tensors."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class Adam:
    """Standard bias-corrected Adam, applied in place.

    Moment buffers shape-match their parameters and share their dtype; the
    step counter strictly increases.  Updates happen in a fixed parameter
    order so repeated seeded runs are bit-identical.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            dt = p.data.dtype.type
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: grad shape {g.shape} vs param {p.data.shape} ({name})")
            b1, b2 = dt(self.beta1), dt(self.beta2)
            self.m[name] = b1 * self.m[name] + (dt(1) - b1) * g
            self.v[name] = b2 * self.v[name] + (dt(1) - b2) * g * g
            m_hat = self.m[name] / dt(1.0 - self.beta1 ** t)
            v_hat = self.v[name] / dt(1.0 - self.beta2 ** t)
            p.data = p.data - dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers in a serializable flat map."""
        out: dict[str, np.ndarray] = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, table: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = table[f"adam.m.{k}"].reshape(self.m[k].shape).astype(self.m[k].dtype)
            self.v[k] = table[f"adam.v.{k}"].reshape(self.v[k].shape).astype(self.v[k].dtype)
        self.step_count = step_count
