"""Stateless numerical primitives: 1-D convolution and the recurrent cell steps.

Arrays are float64 numpy arrays. Single-sample functions take
``[channels, spatial]`` inputs. The batched helpers used by the layers work in
``[batch, spatial, channels]`` layout, which matches the feature tensor axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch

GATES = ("i", "f", "c", "o")


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_kernel(in_ch, kernel):
    if kernel.ndim != 3:
        raise ShapeMismatch(f"kernel must be [out, in, k], got shape {kernel.shape}")
    if kernel.shape[1] != in_ch:
        raise ShapeMismatch(f"kernel expects {kernel.shape[1]} input channels, got {in_ch}")
    if kernel.shape[2] % 2 != 1:
        raise ShapeMismatch(f"kernel width must be odd, got {kernel.shape[2]}")


def im2col(x, k):
    """``[B, S, C]`` -> ``[B, S, C*k]`` zero-padded 'same' windows (index ``c*k + j``)."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [B, S, C, k]
    B, S, C, _ = win.shape
    return win.reshape(B, S, C * k)


def col2im(dcols, C, k):
    """Adjoint of :func:`im2col`: ``[B, S, C*k]`` -> ``[B, S, C]``."""
    pad = k // 2
    B, S, _ = dcols.shape
    d = dcols.reshape(B, S, C, k)
    dxp = np.zeros((B, S + 2 * pad, C))
    for j in range(k):
        dxp[:, j:j + S, :] += d[:, :, :, j]
    return dxp[:, pad:pad + S, :]


def conv1d_same_batch(x, kernel):
    """Batched same-size cross-correlation over axis 1, ``[B, S, in] -> [B, S, out]``."""
    if x.ndim != 3:
        raise ShapeMismatch(f"expected [B, S, C] input, got shape {x.shape}")
    _check_kernel(x.shape[2], kernel)
    out_ch, _, k = kernel.shape
    return im2col(x, k) @ kernel.reshape(out_ch, -1).T


def conv1d_same(x, kernel):
    """Same-size convolution over the lot axis.

    ``out[o, s] = sum_i sum_j kernel[o, i, j] * xpad[i, s + j]`` where ``xpad``
    has ``k // 2`` zeros on each side. This is the cross-correlation
    orientation (no kernel flip), as in most deep-learning libraries.
    """
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeMismatch(f"expected [in_ch, spatial] input, got shape {x.shape}")
    return conv1d_same_batch(x.T[None], kernel)[0].T


@dataclass(frozen=True)
class ConvLSTMState:
    H: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        if self.H.shape != self.C.shape:
            raise ShapeMismatch(f"H {self.H.shape} and C {self.C.shape} differ")

    @classmethod
    def zeros(cls, out_ch, spatial):
        return cls(np.zeros((out_ch, spatial)), np.zeros((out_ch, spatial)))


def convlstm_step(x_t, state, p):
    """One ConvLSTM step with peephole connections.

    ``p`` maps ``W_x{g}``/``W_h{g}`` (kernels ``[out, in, k]``), ``W_ci``,
    ``W_cf``, ``W_co`` (``[out, spatial]``) and ``b_{g}`` (``[out]``).
    The output-gate peephole reads the *updated* cell state.
    """
    x_t = np.asarray(x_t, dtype=float)
    H, C = state.H, state.C
    if x_t.ndim != 2 or x_t.shape[1] != H.shape[1]:
        raise ShapeMismatch(f"x_t {x_t.shape} incompatible with state {H.shape}")
    for name in ("W_ci", "W_cf", "W_co"):
        if p[name].shape != C.shape:
            raise ShapeMismatch(f"{name} has shape {p[name].shape}, state is {C.shape}")

    def pre(g):
        return conv1d_same(x_t, p["W_x" + g]) + conv1d_same(H, p["W_h" + g]) + p["b_" + g][:, None]

    i = sigmoid(pre("i") + p["W_ci"] * C)
    f = sigmoid(pre("f") + p["W_cf"] * C)
    C_new = f * C + i * np.tanh(pre("c"))
    o = sigmoid(pre("o") + p["W_co"] * C_new)
    return ConvLSTMState(o * np.tanh(C_new), C_new)


def lstm_step(x_t, h_prev, c_prev, p):
    """Canonical LSTM step (no peepholes). Weights ``W_x{g}`` are ``[hidden, in]``."""
    x_t = np.asarray(x_t, dtype=float)
    if p["W_xi"].shape[1] != x_t.shape[-1] or h_prev.shape != c_prev.shape:
        raise ShapeMismatch("lstm_step: inconsistent shapes")

    def pre(g):
        return x_t @ p["W_x" + g].T + h_prev @ p["W_h" + g].T + p["b_" + g]

    i = sigmoid(pre("i"))
    f = sigmoid(pre("f"))
    c = f * c_prev + i * np.tanh(pre("c"))
    o = sigmoid(pre("o"))
    return o * np.tanh(c), c
