"""Layers with hand-written reverse-mode gradients.

Every layer caches what it needs during :meth:`Layer.forward` and consumes the
cache in :meth:`Layer.backward`, which accumulates parameter gradients into
``layer.grads`` and returns the gradient with respect to the layer input.

Sequence layers take feature windows shaped ``[batch, time, lots, channels]``
and emit the final-step code ``[batch, lots, hidden]``.
"""
from __future__ import annotations

import numpy as np

from ..errors import NoForwardRecorded, ShapeMismatch
from .functional import GATES, col2im, im2col, sigmoid


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NoForwardRecorded(f"{self.kind}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def config(self):
        return {}

    def describe(self):
        return {"kind": self.kind, **self.config()}


class Dense(Layer):
    """Affine map over the last axis: ``y = x @ W.T + b``."""

    kind = "Dense"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.params = {"W": glorot(rng, (n_out, n_in), n_in, n_out), "b": np.zeros(n_out)}
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Dense expects last axis {self.n_in}, got {x.shape}")
        self._cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        x = self._take_cache()
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.grads["W"] += dy2.T @ x2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"]

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}


class ReLU(Layer):
    """Rectifier; the subgradient at exactly 0 is taken as 0."""

    kind = "ReLU"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * y * (1.0 - y)


class LogSoftmax(Layer):
    kind = "LogSoftmax"

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy - np.exp(y) * dy.sum(axis=-1, keepdims=True)


class Squeeze(Layer):
    """Drop a trailing singleton axis (regressor head output)."""

    kind = "Squeeze"

    def forward(self, x):
        if x.shape[-1] != 1:
            raise ShapeMismatch(f"Squeeze expects trailing axis 1, got {x.shape}")
        self._cache = True
        return x[..., 0]

    def backward(self, dy):
        self._take_cache()
        return dy[..., None]


class WindowFlatten(Layer):
    """Flatten a ``[B, T, L, C]`` window.

    ``scope="lot"`` keeps lots separate (``[B, L, T*C]``); ``scope="all"``
    flattens lots too (``[B, T*L*C]``).
    """

    kind = "WindowFlatten"

    def __init__(self, scope="lot"):
        super().__init__()
        if scope not in ("lot", "all"):
            raise ValueError(f"unknown flatten scope {scope!r}")
        self.scope = scope

    def forward(self, x):
        self._cache = x.shape
        B, T, L, C = x.shape
        if self.scope == "lot":
            return x.transpose(0, 2, 1, 3).reshape(B, L, T * C)
        return x.reshape(B, T * L * C)

    def backward(self, dy):
        B, T, L, C = self._take_cache()
        if self.scope == "lot":
            return dy.reshape(B, L, T, C).transpose(0, 2, 1, 3)
        return dy.reshape(B, T, L, C)

    def config(self):
        return {"scope": self.scope}


class SplitLots(Layer):
    """``[B, L*D]`` -> ``[B, L, D]``."""

    kind = "SplitLots"

    def __init__(self, n_lots):
        super().__init__()
        self.n_lots = n_lots

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], self.n_lots, -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())

    def config(self):
        return {"n_lots": self.n_lots}


class ChannelAffine(Layer):
    """Per-channel ``y = x * scale + shift`` over the last axis; starts as the identity."""

    kind = "ChannelAffine"

    def __init__(self, n_channels):
        super().__init__()
        self.params = {"scale": np.ones(n_channels), "shift": np.zeros(n_channels)}
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.params["scale"].shape[0]:
            raise ShapeMismatch(f"ChannelAffine expects {self.params['scale'].shape[0]} channels, got {x.shape[-1]}")
        self._cache = x
        return x * self.params["scale"] + self.params["shift"]

    def backward(self, dy):
        x = self._take_cache()
        axes = tuple(range(dy.ndim - 1))
        self.grads["scale"] += (dy * x).sum(axis=axes)
        self.grads["shift"] += dy.sum(axis=axes)
        return dy * self.params["scale"]

    def config(self):
        return {"n_channels": int(self.params["scale"].shape[0])}


class FlattenLots(Layer):
    """``[B, L, D]`` -> ``[B, L*D]``."""

    kind = "FlattenLots"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


class LSTM(Layer):
    """Canonical LSTM run independently on each lot with shared weights.

    Input ``[B, T, L, C]``, output final hidden state ``[B, L, H]``.
    Weights ``W_x{g}`` are ``[H, C]`` and ``W_h{g}`` are ``[H, H]``.
    """

    kind = "LSTM"

    def __init__(self, n_in, hidden, rng=None, forget_bias=1.0):
        super().__init__()
        self.n_in, self.hidden = n_in, hidden
        rng = rng or np.random.default_rng(0)
        for g in GATES:
            self.params["W_x" + g] = glorot(rng, (hidden, n_in), n_in, hidden)
            self.params["W_h" + g] = glorot(rng, (hidden, hidden), hidden, hidden)
        for g in GATES:
            self.params["b_" + g] = np.full(hidden, forget_bias if g == "f" else 0.0)
        self.zero_grad()

    def _stacked(self):
        p = self.params
        W = np.concatenate([np.concatenate([p["W_x" + g], p["W_h" + g]], axis=1) for g in GATES])
        b = np.concatenate([p["b_" + g] for g in GATES])
        return W, b

    def forward(self, x):
        B, T, L, C = x.shape
        if C != self.n_in:
            raise ShapeMismatch(f"LSTM expects {self.n_in} channels, got {C}")
        H = self.hidden
        W, b = self._stacked()
        xs = x.transpose(0, 2, 1, 3).reshape(B * L, T, C)
        h = np.zeros((B * L, H))
        c = np.zeros((B * L, H))
        steps = []
        for t in range(T):
            xh = np.concatenate([xs[:, t], h], axis=1)
            z = xh @ W.T + b
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = sigmoid(z[:, 3 * H:])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((xh, c_prev, i, f, g, o, tc))
        self._cache = (x.shape, W, steps)
        return h.reshape(B, L, H)

    def backward(self, dy):
        (B, T, L, C), W, steps = self._take_cache()
        H = self.hidden
        dW = np.zeros_like(W)
        db = np.zeros(4 * H)
        dxs = np.zeros((B * L, T, C))
        dh = dy.reshape(B * L, H)
        dc = np.zeros((B * L, H))
        for t in range(T - 1, -1, -1):
            xh, c_prev, i, f, g, o, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dc = dc * f
            dW += dz.T @ xh
            db += dz.sum(axis=0)
            dxh = dz @ W
            dxs[:, t] = dxh[:, :C]
            dh = dxh[:, C:]
        for n, g in enumerate(GATES):
            rows = slice(n * H, (n + 1) * H)
            self.grads["W_x" + g] += dW[rows, :C]
            self.grads["W_h" + g] += dW[rows, C:]
            self.grads["b_" + g] += db[rows]
        return dxs.reshape(B, L, T, C).transpose(0, 2, 1, 3)

    def config(self):
        return {"n_in": self.n_in, "hidden": self.hidden}


class ConvLSTM(Layer):
    """ConvLSTM cell unrolled over the window, convolving along the lot axis.

    Kernels ``W_x{g}`` are ``[H, C, k]``, ``W_h{g}`` are ``[H, H, k]``;
    peepholes ``W_ci``, ``W_cf``, ``W_co`` are ``[H, n_lots]`` Hadamard
    weights. With ``peepholes=False`` the peephole terms are dropped entirely.
    """

    kind = "ConvLSTM"

    def __init__(self, n_in, hidden, n_lots, kernel=3, rng=None, peepholes=True, forget_bias=1.0):
        super().__init__()
        if kernel % 2 != 1:
            raise ShapeMismatch(f"kernel width must be odd, got {kernel}")
        self.n_in, self.hidden, self.n_lots, self.kernel = n_in, hidden, n_lots, kernel
        self.peepholes = peepholes
        rng = rng or np.random.default_rng(0)
        k = kernel
        for g in GATES:
            self.params["W_x" + g] = glorot(rng, (hidden, n_in, k), n_in * k, hidden * k)
            self.params["W_h" + g] = glorot(rng, (hidden, hidden, k), hidden * k, hidden * k)
        if peepholes:
            for g in ("i", "f", "o"):
                self.params["W_c" + g] = np.zeros((hidden, n_lots))
        for g in GATES:
            self.params["b_" + g] = np.full(hidden, forget_bias if g == "f" else 0.0)
        self.zero_grad()

    def _stacked(self):
        p = self.params
        W = np.concatenate([np.concatenate([p["W_x" + g], p["W_h" + g]], axis=1) for g in GATES])
        b = np.concatenate([p["b_" + g] for g in GATES])
        return W.reshape(W.shape[0], -1), b

    def forward(self, x):
        B, T, L, C = x.shape
        if C != self.n_in or L != self.n_lots:
            raise ShapeMismatch(
                f"ConvLSTM expects [*, *, {self.n_lots}, {self.n_in}], got {x.shape}")
        H, k = self.hidden, self.kernel
        Wm, b = self._stacked()
        if self.peepholes:
            Wci, Wcf, Wco = (self.params["W_c" + g].T for g in ("i", "f", "o"))
        h = np.zeros((B, L, H))
        c = np.zeros((B, L, H))
        steps = []
        for t in range(T):
            cols = im2col(np.concatenate([x[:, t], h], axis=2), k)
            z = cols @ Wm.T + b
            zi, zf, zc, zo = z[..., :H], z[..., H:2 * H], z[..., 2 * H:3 * H], z[..., 3 * H:]
            c_prev = c
            if self.peepholes:
                zi = zi + Wci * c_prev
                zf = zf + Wcf * c_prev
            i = sigmoid(zi)
            f = sigmoid(zf)
            g = np.tanh(zc)
            c = f * c_prev + i * g
            if self.peepholes:
                zo = zo + Wco * c
            o = sigmoid(zo)
            tc = np.tanh(c)
            h = o * tc
            steps.append((cols, c_prev, c, i, f, g, o, tc))
        self._cache = (x.shape, Wm, steps)
        return h

    def backward(self, dy):
        (B, T, L, C), Wm, steps = self._take_cache()
        H, k = self.hidden, self.kernel
        dWm = np.zeros_like(Wm)
        db = np.zeros(4 * H)
        if self.peepholes:
            Wci, Wcf, Wco = (self.params["W_c" + g].T for g in ("i", "f", "o"))
            dWci, dWcf, dWco = (np.zeros((L, H)) for _ in range(3))
        dx = np.zeros((B, T, L, C))
        dh = dy
        dc = np.zeros((B, L, H))
        for t in range(T - 1, -1, -1):
            cols, c_prev, c, i, f, g, o, tc = steps[t]
            dzo = dh * tc * o * (1.0 - o)
            dc = dc + dh * o * (1.0 - tc * tc)
            if self.peepholes:
                dc = dc + dzo * Wco
                dWco += (dzo * c).sum(axis=0)
            dzi = dc * g * i * (1.0 - i)
            dzf = dc * c_prev * f * (1.0 - f)
            dzc = dc * i * (1.0 - g * g)
            dc = dc * f
            if self.peepholes:
                dc = dc + dzi * Wci + dzf * Wcf
                dWci += (dzi * c_prev).sum(axis=0)
                dWcf += (dzf * c_prev).sum(axis=0)
            dz = np.concatenate([dzi, dzf, dzc, dzo], axis=2)
            dz2 = dz.reshape(-1, 4 * H)
            dWm += dz2.T @ cols.reshape(-1, cols.shape[-1])
            db += dz2.sum(axis=0)
            dxh = col2im(dz @ Wm, C + H, k)
            dx[:, t] = dxh[..., :C]
            dh = dxh[..., C:]
        dW = dWm.reshape(4 * H, C + H, k)
        for n, g in enumerate(GATES):
            rows = slice(n * H, (n + 1) * H)
            self.grads["W_x" + g] += dW[rows, :C]
            self.grads["W_h" + g] += dW[rows, C:]
            self.grads["b_" + g] += db[rows]
        if self.peepholes:
            self.grads["W_ci"] += dWci.T
            self.grads["W_cf"] += dWcf.T
            self.grads["W_co"] += dWco.T
        return dx

    def config(self):
        return {"n_in": self.n_in, "hidden": self.hidden, "n_lots": self.n_lots,
                "kernel": self.kernel, "peepholes": self.peepholes}


class LayerStack:
    """Ordered composition of layers with a flat ``"<index>.<name>"`` parameter tree."""

    def __init__(self, layers, name="stack"):
        self.layers = list(layers)
        self.name = name

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def params(self):
        return {f"{n}.{k}": v for n, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def grads(self):
        return {f"{n}.{k}": v for n, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def state(self):
        """Deep copy of the parameter tree."""
        return {k: v.copy() for k, v in self.params().items()}

    def load_state(self, state):
        own = self.params()
        if set(own) != set(state):
            raise ShapeMismatch(f"parameter names differ: {sorted(set(own) ^ set(state))}")
        for k, v in state.items():
            if own[k].shape != v.shape:
                raise ShapeMismatch(f"{k}: shape {v.shape} != {own[k].shape}")
            own[k][...] = v

    def describe(self):
        return [layer.describe() for layer in self.layers]

    def n_params(self):
        return sum(v.size for v in self.params().values())
