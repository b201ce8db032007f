"""Neural network layers built on :mod:`meltfusion.tensor`.

The module has two levels.  Lower-case functions (``conv2d``, ``lstm``, ...)
are the differentiable ops themselves and take explicit parameter tensors.
The ``Layer`` subclasses own parameters, know their output shape, and can be
rebuilt from a plain ``config()`` dict, which is what checkpoints store.

Images are channels-last: ``[B, H, W, C]``.  Sequences are ``[B, T, F]``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor, make_result

# ------------------------------------------------------------------ primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1, same-padded 2-D cross-correlation (im2col + GEMM)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} / kernel {w.shape} not [B,H,W,C] / [k,k,Cin,Cout] with odd k")
    B, H, W, cin = x.shape
    k, _, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} (input {x.shape}) != kernel channels {wcin} (kernel {w.shape})")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    if H < k or W < k:
        raise ShapeError(f"conv2d: spatial dims of {x.shape} smaller than kernel {k}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    # (B,H,W,C,k,k) -> (B,H,W,k,k,C) so rows match w.reshape(k*k*C, Cout)
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(B * H * W, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(B, H, W, cout) + b.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            # one GEMM per kernel offset keeps every product contiguous
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += (g2 @ w.data[i, j].T).reshape(B, H, W, cin)
            gx = gxp[:, p:p + H, p:p + W, :]
        return gx, gw, gb

    return make_result(out, (x, w, b), bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route gradient to the first index."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects [B,H,W,C], got {x.shape}")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape}")
    # window elements in row-major order: top-left, top-right, bottom-left, bottom-right
    quads = [x.data[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, i::2, j::2, :] = g * hit
        return (gx,)

    return make_result(out, (x,), bw, "maxpool2")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running values are
    used instead.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm in train mode needs batch >= 2, got {x.shape}")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = np.mean(centered * centered, axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean.astype(x.data.dtype), running_var.astype(x.data.dtype)
        centered = x.data - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    n = x.size // C

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            # sum(g*gamma) = gamma*gb and sum(g*gamma*xhat) = gamma*gg
            gx = (gamma.data * inv / n) * (n * g - gb - xhat * gg)
        else:
            gx = g * (gamma.data * inv)
        return gx.astype(x.data.dtype, copy=False), gg, gb

    return make_result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,H,W,C], got {x.shape}")
    return T.mean(x, axis=(1, 2))


def dense(x: Tensor, w: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    y = T.bias_add(T.matmul(x, w), b)
    if activation == "relu":
        return T.relu(y)
    if activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return y


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout.  Eval mode and ``rate == 0`` return ``x`` itself."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def lstm_direction(x: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False) -> list[Tensor]:
    """Run one LSTM direction; returns hidden states in input time order.

    Gate layout along the ``4H`` axis is input, forget, candidate, output.
    """
    B, steps, _ = x.shape
    if steps == 0:
        raise ShapeError("lstm needs at least one time step")
    H = u.shape[0]
    xw = T.bias_add(T.matmul(x, w), b)  # [B,T,4H]
    h = Tensor(np.zeros((B, H)), dtype=x.data.dtype)
    c = Tensor(np.zeros((B, H)), dtype=x.data.dtype)
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    hs: list[Tensor | None] = [None] * steps
    for t in order:
        z = T.add(T.slice(xw, (np.s_[:], t)), T.matmul(h, u))
        i = T.sigmoid(T.slice(z, (np.s_[:], np.s_[0:H])))
        f = T.sigmoid(T.slice(z, (np.s_[:], np.s_[H:2 * H])))
        g = T.tanh(T.slice(z, (np.s_[:], np.s_[2 * H:3 * H])))
        o = T.sigmoid(T.slice(z, (np.s_[:], np.s_[3 * H:4 * H])))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        hs[t] = h
    return hs


def lstm(x: Tensor, fwd: tuple[Tensor, Tensor, Tensor],
         bwd: tuple[Tensor, Tensor, Tensor] | None = None,
         return_sequences: bool = True) -> Tensor:
    """Uni- or bidirectional LSTM with zero initial state.

    ``fwd``/``bwd`` are ``(W [F,4H], U [H,4H], b [4H])``.  With ``bwd`` set the
    two directions are concatenated on the feature axis (width ``2H``).  In
    last mode the backward direction contributes its final state, i.e. the one
    computed at ``t = 0``.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm expects [B,T,F], got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("lstm needs at least one time step")
    if fwd[0].shape[0] != x.shape[2]:
        raise ShapeError(f"lstm: input {x.shape} vs kernel {fwd[0].shape}")
    hf = lstm_direction(x, *fwd)
    hb = lstm_direction(x, *bwd, reverse=True) if bwd is not None else None
    if return_sequences:
        seq = T.stack(hf, axis=1)
        if hb is None:
            return seq
        return T.concat([seq, T.stack(hb, axis=1)], axis=-1)
    if hb is None:
        return hf[-1]
    return T.concat([hf[-1], hb[0]], axis=-1)


def multi_head_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int,
                         key_dim: int, return_weights: bool = False):
    """Self-attention: softmax(Q K^T / sqrt(key_dim)) V per head, then project."""
    if x.ndim != 3:
        raise ShapeError(f"attention expects [B,T,D], got {x.shape}")
    B, steps, D = x.shape
    value_dim = wv.shape[1] // heads

    def split(t, dim):
        return T.transpose(T.reshape(t, (B, steps, heads, dim)), (0, 2, 1, 3))

    q = split(T.bias_add(T.matmul(x, wq), bq), key_dim)
    k = split(T.bias_add(T.matmul(x, wk), bk), key_dim)
    v = split(T.bias_add(T.matmul(x, wv), bv), value_dim)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(key_dim))
    weights = T.softmax(scores, axis=-1)  # [B,h,T,T]
    ctx = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
    ctx = T.reshape(ctx, (B, steps, heads * value_dim))
    out = T.bias_add(T.matmul(ctx, wo), bo)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- initializers

def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# ---------------------------------------------------------------------- layers

class Layer:
    """Base class: parameters, non-trainable buffers, config, shape rule."""

    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"type": type(self).__name__, "name": self.name}

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        """Create parameters for ``in_shape`` (no batch axis); return output shape."""
        return self.output_shape(in_shape)

    def output_shape(self, in_shape):
        return in_shape

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def _param(self, key, value):
        t = Tensor(value, requires_grad=True, name=f"{self.name}.{key}")
        self.params[key] = t
        return t


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters: int, kernel: int = 3, activation: str = "relu", name=None):
        super().__init__(name)
        self.filters, self.kernel, self.activation = filters, kernel, activation

    def config(self):
        return {**super().config(), "filters": self.filters, "kernel": self.kernel,
                "activation": self.activation}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: expects [H,W,C], got {in_shape}")
        h, w, _ = in_shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"{self.name}: input {in_shape} smaller than kernel")
        return (h, w, self.filters)

    def build(self, in_shape, rng):
        out = self.output_shape(in_shape)
        k, cin = self.kernel, in_shape[-1]
        self._param("kernel", he_normal(rng, (k, k, cin, self.filters), k * k * cin))
        self._param("bias", np.zeros(self.filters))
        return out

    def __call__(self, x, training=False, rng=None):
        y = conv2d(x, self.params["kernel"], self.params["bias"])
        return T.relu(y) if self.activation == "relu" else y


class MaxPool2(Layer):
    kind = "maxpool2"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: odd spatial dims {in_shape}")
        return (h // 2, w // 2, c)

    def __call__(self, x, training=False, rng=None):
        return maxpool2(x)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, momentum: float = 0.9, eps: float = 1e-5, name=None):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps

    def config(self):
        return {**super().config(), "momentum": self.momentum, "eps": self.eps}

    def build(self, in_shape, rng):
        c = in_shape[-1]
        self._param("gamma", np.ones(c))
        self._param("beta", np.zeros(c))
        self.buffers["running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers["running_var"] = np.ones(c, dtype=np.float32)
        return in_shape

    def __call__(self, x, training=False, rng=None):
        return batchnorm(x, self.params["gamma"], self.params["beta"],
                         self.buffers["running_mean"], self.buffers["running_var"],
                         training, self.momentum, self.eps)


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, in_shape):
        return (in_shape[-1],)

    def __call__(self, x, training=False, rng=None):
        return global_avg_pool(x)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, training=False, rng=None):
        return T.reshape(x, (x.shape[0], -1))


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int, activation: str = "linear", name=None):
        super().__init__(name)
        self.units, self.activation = units, activation

    def config(self):
        return {**super().config(), "units": self.units, "activation": self.activation}

    def output_shape(self, in_shape):
        return tuple(in_shape[:-1]) + (self.units,)

    def build(self, in_shape, rng):
        din = in_shape[-1]
        if self.activation == "relu":
            w = he_normal(rng, (din, self.units), din)
        else:
            w = glorot_uniform(rng, (din, self.units), din, self.units)
        self._param("kernel", w)
        self._param("bias", np.zeros(self.units))
        return self.output_shape(in_shape)

    def __call__(self, x, training=False, rng=None):
        return dense(x, self.params["kernel"], self.params["bias"], self.activation)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float, name=None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return {**super().config(), "rate": self.rate}

    def __call__(self, x, training=False, rng=None):
        return dropout(x, self.rate, training, rng)


class LSTM(Layer):
    kind = "lstm"

    def __init__(self, units: int, bidirectional: bool = False, return_sequences: bool = True, name=None):
        super().__init__(name)
        self.units, self.bidirectional, self.return_sequences = units, bidirectional, return_sequences

    def config(self):
        return {**super().config(), "units": self.units, "bidirectional": self.bidirectional,
                "return_sequences": self.return_sequences}

    def output_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"{self.name}: expects [T,F], got {in_shape}")
        width = self.units * (2 if self.bidirectional else 1)
        return (in_shape[0], width) if self.return_sequences else (width,)

    def build(self, in_shape, rng):
        out = self.output_shape(in_shape)
        feats, H = in_shape[-1], self.units
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0  # forget gate
        for d in (("fwd", "bwd") if self.bidirectional else ("fwd",)):
            self._param(f"{d}_kernel", he_normal(rng, (feats, 4 * H), feats))
            self._param(f"{d}_recurrent", he_normal(rng, (H, 4 * H), H))
            self._param(f"{d}_bias", bias)
        return out

    def _weights(self, d):
        p = self.params
        return p[f"{d}_kernel"], p[f"{d}_recurrent"], p[f"{d}_bias"]

    def __call__(self, x, training=False, rng=None):
        bwd = self._weights("bwd") if self.bidirectional else None
        return lstm(x, self._weights("fwd"), bwd, self.return_sequences)


class MultiHeadAttention(Layer):
    kind = "attention"

    def __init__(self, heads: int = 4, key_dim: int = 16, name=None):
        super().__init__(name)
        self.heads, self.key_dim = heads, key_dim

    def config(self):
        return {**super().config(), "heads": self.heads, "key_dim": self.key_dim}

    def output_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"{self.name}: expects [T,D], got {in_shape}")
        return in_shape

    def build(self, in_shape, rng):
        D = in_shape[-1]
        inner = self.heads * self.key_dim
        for key in ("query", "key", "value"):
            self._param(f"{key}_kernel", glorot_uniform(rng, (D, inner), D, inner))
            self._param(f"{key}_bias", np.zeros(inner))
        self._param("out_kernel", glorot_uniform(rng, (inner, D), inner, D))
        self._param("out_bias", np.zeros(D))
        return in_shape

    def __call__(self, x, training=False, rng=None, return_weights=False):
        p = self.params
        return multi_head_attention(
            x, p["query_kernel"], p["query_bias"], p["key_kernel"], p["key_bias"],
            p["value_kernel"], p["value_bias"], p["out_kernel"], p["out_bias"],
            self.heads, self.key_dim, return_weights=return_weights)


class TimeMean(Layer):
    """Average a ``[B,T,D]`` sequence over time."""

    kind = "time_mean"

    def output_shape(self, in_shape):
        return tuple(in_shape[1:])

    def __call__(self, x, training=False, rng=None):
        return T.mean(x, axis=1)


LAYER_TYPES = {cls.__name__: cls for cls in
               (Conv2D, MaxPool2, BatchNorm, GlobalAvgPool, Flatten, Dense, Dropout,
                LSTM, MultiHeadAttention, TimeMean)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("type")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None
    return cls(**cfg)
