"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b, floor=1e-8):
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def check_stack(stack, x, weight=None, h=1e-5):
    """Compare backprop against finite differences for ``sum(weight * stack(x))``.

    Returns a dict of relative errors keyed by parameter name plus ``"input"``.
    """
    x = np.array(x, dtype=float)
    y = stack.forward(x)
    if weight is None:
        weight = np.random.default_rng(1).normal(size=y.shape)

    def loss():
        return float((weight * stack.forward(x)).sum())

    stack.zero_grad()
    stack.forward(x)
    dx = stack.backward(weight)
    analytic = {k: v.copy() for k, v in stack.grads().items()}
    errors = {}
    for name, p in stack.params().items():
        errors[name] = relative_error(analytic[name], numeric_grad(loss, p, h))
    errors["input"] = relative_error(dx, numeric_grad(loss, x, h))
    return errors
