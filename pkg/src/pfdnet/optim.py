"""Adam with bias correction, over a dict of named float32 arrays."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], names=None) -> None:
        """Update ``params`` in place; only ``names`` (default: all grads) move."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in names if names is not None else grads:
            p, g = params[k], grads[k]
            if p.shape != g.shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros(p.shape, dtype=np.float64)
                self.v[k] = np.zeros(p.shape, dtype=np.float64)
            g = g.astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.t], dtype=np.float32)}
        for k in self.m:
            out[f"adam/m/{k}"] = self.m[k].astype(np.float32)
            out[f"adam/v/{k}"] = self.v[k].astype(np.float32)
        return out


def adam_step(params, grads, state: Adam) -> dict[str, np.ndarray]:
    state.step(params, grads)
    return params
