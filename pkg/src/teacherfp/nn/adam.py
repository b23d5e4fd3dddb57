"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np


class GradientDiverged(RuntimeError):
    """Raised when a gradient contains NaN/inf; names the offending slot."""


class AdamState:
    """Adaptive-moment state bound to a dict of parameter arrays.

    Parameters are updated in place through this exclusive handle:
    m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, with bias-corrected
    step size lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}

    def update(self, grads):
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for key, g in grads.items():
            p = self.params[key]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {key}")
            if not np.all(np.isfinite(g)):
                raise GradientDiverged(f"non-finite gradient for parameter {key}")
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return self.params
