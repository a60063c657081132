"""Adam over flat parameter trees."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def adam_init(params):
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_update(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam step. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads have different keys")
    t = state["t"] + 1
    m_new, v_new, p_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p_new[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return p_new, {"t": t, "m": m_new, "v": v_new}


class Adam:
    """In-place wrapper around :func:`adam_update` bound to a :class:`LayerStack`."""

    def __init__(self, stack, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.stack = stack
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = adam_init(stack.params())

    def step(self):
        params = self.stack.params()
        grads = self.stack.grads()
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        new, self.state = adam_update(params, grads, self.state,
                                      self.lr, self.beta1, self.beta2, self.eps)
        for k, p in params.items():
            p[...] = new[k]
