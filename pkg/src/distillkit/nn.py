"""Minimal NHWC neural-network engine: layers, backprop, and Adam.

Everything is plain numpy. Forward passes and gradients are computed in
float64 regardless of the storage dtype of the parameters; the analytic
gradients of every layer are covered by finite-difference tests.

Layers expose ``param_specs`` (name, shape, init kind), ``forward`` returning
``(y, cache)``, and ``backward`` returning ``(dx, grads)``. Parameter names
are flat strings like ``stage0.conv0.w`` shared across the toolkit.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-5

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.shape[0] == 0:
        return logits.copy()
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


class Conv2d:
    """3x3-style convolution over NHWC input with SAME padding."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3, stride: int = 1):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride

    def param_specs(self):
        return [
            (f"{self.name}.w", (self.kernel, self.kernel, self.c_in, self.c_out), "conv"),
            (f"{self.name}.b", (self.c_out,), "zeros"),
        ]

    def _slices(self, h: int, w: int):
        pt, pb, ho = _same_padding(h, self.kernel, self.stride)
        pl, pr, wo = _same_padding(w, self.kernel, self.stride)
        return (pt, pb, ho), (pl, pr, wo)

    def forward(self, params, x):
        weight = params[f"{self.name}.w"]
        bias = params[f"{self.name}.b"]
        b, h, w, _ = x.shape
        (pt, pb, ho), (pl, pr, wo) = self._slices(h, w)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        s = self.stride
        y = np.zeros((b, ho, wo, self.c_out), dtype=x.dtype)
        for di in range(self.kernel):
            for dj in range(self.kernel):
                xs = xp[:, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s, :]
                y += np.tensordot(xs, weight[di, dj], axes=([3], [0]))
        y += bias
        return y, (xp, x.shape)

    def backward(self, params, cache, dy):
        weight = params[f"{self.name}.w"]
        xp, x_shape = cache
        _, h, w, _ = x_shape
        (pt, _, ho), (pl, _, wo) = self._slices(h, w)
        s = self.stride
        dw = np.zeros_like(weight)
        dxp = np.zeros_like(xp)
        for di in range(self.kernel):
            for dj in range(self.kernel):
                rows = slice(di, di + (ho - 1) * s + 1, s)
                cols = slice(dj, dj + (wo - 1) * s + 1, s)
                xs = xp[:, rows, cols, :]
                dw[di, dj] = np.tensordot(xs, dy, axes=([0, 1, 2], [0, 1, 2]))
                dxp[:, rows, cols, :] += np.tensordot(dy, weight[di, dj], axes=([3], [1]))
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        grads = {f"{self.name}.w": dw, f"{self.name}.b": dy.sum(axis=(0, 1, 2))}
        return dx, grads


class ChannelNorm:
    """Stateless per-position normalization over the channel axis.

    Keeps no running statistics, so inference equals training and the forward
    pass is a pure function of the parameters.
    """

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels

    def param_specs(self):
        return [
            (f"{self.name}.gamma", (self.channels,), "ones"),
            (f"{self.name}.beta", (self.channels,), "zeros"),
        ]

    def forward(self, params, x):
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xn = xc * inv
        return gamma * xn + beta, (xn, inv)

    def backward(self, params, cache, dy):
        gamma = params[f"{self.name}.gamma"]
        xn, inv = cache
        reduce_axes = tuple(range(dy.ndim - 1))
        dgamma = (dy * xn).sum(axis=reduce_axes)
        dbeta = dy.sum(axis=reduce_axes)
        dxn = dy * gamma
        mean_dxn = dxn.mean(axis=-1, keepdims=True)
        mean_dxn_xn = (dxn * xn).mean(axis=-1, keepdims=True)
        dx = inv * (dxn - mean_dxn - xn * mean_dxn_xn)
        grads = {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}
        return dx, grads


class Silu:
    """Smooth ReLU-family activation, x * sigmoid(x); fixed project-wide."""

    def __init__(self, name: str):
        self.name = name

    def param_specs(self):
        return []

    def forward(self, params, x):
        s = sigmoid(x)
        return x * s, (x, s)

    def backward(self, params, cache, dy):
        x, s = cache
        return dy * (s * (1.0 + x * (1.0 - s))), {}


class GlobalAvgPool:
    def __init__(self, name: str):
        self.name = name

    def param_specs(self):
        return []

    def forward(self, params, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, params, cache, dy):
        _, h, w, _ = cache
        dx = np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy()
        return dx, {}


class Dense:
    def __init__(self, name: str, d_in: int, d_out: int):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out

    def param_specs(self):
        return [
            (f"{self.name}.w", (self.d_in, self.d_out), "dense"),
            (f"{self.name}.b", (self.d_out,), "zeros"),
        ]

    def forward(self, params, x):
        return x @ params[f"{self.name}.w"] + params[f"{self.name}.b"], x

    def backward(self, params, cache, dy):
        x = cache
        grads = {f"{self.name}.w": x.T @ dy, f"{self.name}.b": dy.sum(axis=0)}
        return dy @ params[f"{self.name}.w"].T, grads


def init_params(layers, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, unit norm gains; draw order is fixed."""
    params: dict[str, np.ndarray] = {}
    for layer in layers:
        for name, shape, kind in layer.param_specs():
            if kind == "zeros":
                value = np.zeros(shape)
            elif kind == "ones":
                value = np.ones(shape)
            elif kind == "conv":
                fan_in = shape[0] * shape[1] * shape[2]
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif kind == "dense":
                value = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
            else:
                raise ValueError(f"unknown init kind {kind!r}")
            params[name] = value.astype(dtype)
    return params


def forward_layers(layers, params, x):
    """Run the stack, returning the output and a tape for backprop."""
    tape = []
    for layer in layers:
        x, cache = layer.forward(params, x)
        tape.append(cache)
    return x, tape


def backward_layers(layers, params, tape, dy, inject: dict[int, np.ndarray] | None = None):
    """Backprop through the stack.

    ``inject`` maps a layer index to an extra gradient added to that layer's
    *output* (used to feed the feature-distance loss into the embedding).
    Returns accumulated parameter gradients.
    """
    grads: dict[str, np.ndarray] = {}
    for i in range(len(layers) - 1, -1, -1):
        if inject and i in inject:
            dy = dy + inject[i]
        dy, layer_grads = layers[i].backward(params, tape[i], dy)
        grads.update(layer_grads)
    return grads


class Adam:
    """Adaptive-moment optimizer (bias-corrected), applied in float64.

    One ``step`` performs exactly one update on the parameters passed in;
    parameters absent from ``grads`` (frozen ones) are never touched.
    """

    def __init__(self, learning_rate: float, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self._m.setdefault(name, np.zeros_like(params[name]))
            v = self._v.setdefault(name, np.zeros_like(params[name]))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
