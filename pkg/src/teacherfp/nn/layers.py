"""Layer implementations with explicit forward/backward passes.

Conventions: activations are NCHW (batch, channels, height, width) or NF
(batch, features); parameters are float32; reductions accumulate in
float64 and are cast back to the activation dtype. Layers are
dtype-agnostic in forward/backward so a float64 shadow pass can be used
for finite-difference checks.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Input shape incompatible with a layer; carries the layer index."""

    def __init__(self, msg, layer_index=None):
        super().__init__(msg)
        self.layer_index = layer_index


def _sum_to(x, axes, like):
    # float64 accumulation, cast back to the operand dtype
    return np.sum(x, axis=axes, dtype=np.float64).astype(like.dtype)


def _im2col(x, kh, kw, sh, sw):
    """Extract sliding windows: (N,C,H,W) -> (N, OH*OW, C*kh*kw)."""
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    sn, sc, srow, scol = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, kh, kw), (sn, sc, srow * sh, scol * sw, srow, scol),
        writeable=False)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, oh * ow, c * kh * kw), oh, ow


class Layer:
    """Base class: stateless unless it declares params/state."""

    kind = "base"

    def __init__(self):
        self.params = {}   # learnable arrays, updated by the optimizer
        self.state = {}    # non-learnable arrays (batchnorm running stats)

    def init_params(self, rng):
        pass

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False, mutate=False):
        raise NotImplementedError

    def backward(self, dout, cache, want_param_grads=True):
        raise NotImplementedError

    def spec(self):
        return {"kind": self.kind}

    def param_order(self):
        """Declaration order of params+state for serialization."""
        return []


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.params["weight"] = np.zeros(
            (out_channels, in_channels, kernel, kernel), dtype=np.float32)
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        std = np.sqrt(2.0 / fan_in)
        self.params["weight"] = rng.normal(
            0.0, std, self.params["weight"].shape).astype(np.float32)
        self.params["bias"] = np.zeros(self.out_channels, dtype=np.float32)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels},H,W), got {in_shape}")
        c, h, w = in_shape
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < self.kernel or wp < self.kernel:
            raise ShapeError(f"conv2d kernel {self.kernel} larger than padded input {in_shape}")
        oh = (hp - self.kernel) // self.stride + 1
        ow = (wp - self.kernel) // self.stride + 1
        return (self.out_channels, oh, ow)

    def forward(self, x, train=False, mutate=False):
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols, oh, ow = _im2col(x, k, k, s, s)  # (N, OH*OW, C*k*k)
        n = x.shape[0]
        w = self.params["weight"].reshape(self.out_channels, -1).astype(x.dtype)
        # (1,F,CK) @ (N,CK,OHOW): transposed views feed GEMM without copies
        y = np.matmul(w[None], cols.transpose(0, 2, 1))
        y += self.params["bias"].astype(x.dtype)[:, None]
        return y.reshape(n, self.out_channels, oh, ow), (cols, x.shape, x.dtype)

    def backward(self, dout, cache, want_param_grads=True):
        cols, padded_shape, dtype = cache
        k, s, p = self.kernel, self.stride, self.padding
        n, f, oh, ow = dout.shape
        dflat = dout.reshape(n, f, oh * ow)
        grads = {}
        if want_param_grads:
            dw = np.matmul(dflat, cols).sum(axis=0)  # (F, C*k*k)
            grads["weight"] = dw.reshape(self.params["weight"].shape).astype(np.float32)
            grads["bias"] = _sum_to(dflat, (0, 2), self.params["bias"])
        w = self.params["weight"].reshape(f, -1).astype(dtype)
        dcols = np.matmul(dflat.transpose(0, 2, 1), w)  # (N, OH*OW, C*k*k)
        dc = dcols.reshape(n, oh, ow, self.in_channels, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(padded_shape, dtype=dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dc[:, :, :, :, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, grads

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def param_order(self):
        return [("params", "weight"), ("params", "bias")]


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = np.zeros((out_features, in_features), dtype=np.float32)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def init_params(self, rng):
        std = np.sqrt(2.0 / self.in_features)
        self.params["weight"] = rng.normal(
            0.0, std, self.params["weight"].shape).astype(np.float32)
        self.params["bias"] = np.zeros(self.out_features, dtype=np.float32)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, train=False, mutate=False):
        w = self.params["weight"].astype(x.dtype)
        return x @ w.T + self.params["bias"].astype(x.dtype), x

    def backward(self, dout, cache, want_param_grads=True):
        x = cache
        grads = {}
        if want_param_grads:
            grads["weight"] = (dout.T @ x).astype(np.float32)
            grads["bias"] = _sum_to(dout, 0, self.params["bias"])
        dx = dout @ self.params["weight"].astype(dout.dtype)
        return dx, grads

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}

    def param_order(self):
        return [("params", "weight"), ("params", "bias")]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, mutate=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache, want_param_grads=True):
        return dout * cache, {}


class _Pool(Layer):
    """Non-overlapping pooling; stride equals the window size."""

    def __init__(self, kernel):
        super().__init__()
        self.kernel = kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C,H,W), got {in_shape}")
        c, h, w = in_shape
        k = self.kernel
        if h % k or w % k:
            raise ShapeError(f"{self.kind} window {k} must divide spatial dims {in_shape}")
        return (c, h // k, w // k)

    def spec(self):
        return {"kind": self.kind, "kernel": self.kernel}


class MaxPool2d(_Pool):
    kind = "maxpool"

    # Pooling runs in two stages (columns within a row, then rows). Strict
    # ">" comparisons keep the earlier cell on ties, so the winner is the
    # first maximal element of the window in row-major order; for windows
    # wider than 2 the same semantics come from argmax.

    def forward(self, x, train=False, mutate=False):
        n, c, h, w = x.shape
        k = self.kernel
        if k == 2:
            cols = x.reshape(-1, 2)
            cidx = cols[:, 1] > cols[:, 0]
            cmax = np.maximum(cols[:, 0], cols[:, 1])
            rows = cmax.reshape(n * c, h // 2, 2, w // 2)
            r0, r1 = rows[:, :, 0, :], rows[:, :, 1, :]
            ridx = r1 > r0
            y = np.maximum(r0, r1)
            return y.reshape(n, c, h // 2, w // 2), (cidx, ridx, x.shape)
        cols = x.reshape(-1, k)
        cidx = np.argmax(cols, axis=1)
        cmax = np.take_along_axis(cols, cidx[:, None], axis=1)[:, 0]
        rows = cmax.reshape(n * c, h // k, k, w // k)
        ridx = np.argmax(rows, axis=2)
        y = np.take_along_axis(rows, ridx[:, :, None, :], axis=2)[:, :, 0, :]
        return y.reshape(n, c, h // k, w // k), (cidx, ridx, x.shape)

    def backward(self, dout, cache, want_param_grads=True):
        cidx, ridx, in_shape = cache
        n, c, h, w = in_shape
        k = self.kernel
        if k == 2:
            d = dout.reshape(n * c, h // 2, w // 2)
            zero = np.zeros((), dtype=dout.dtype)
            drows = np.empty((n * c, h // 2, 2, w // 2), dtype=dout.dtype)
            drows[:, :, 0, :] = np.where(ridx, zero, d)
            drows[:, :, 1, :] = np.where(ridx, d, zero)
            dflat = drows.reshape(-1)
            dcols = np.empty((dflat.shape[0], 2), dtype=dout.dtype)
            dcols[:, 0] = np.where(cidx, zero, dflat)
            dcols[:, 1] = np.where(cidx, dflat, zero)
            return dcols.reshape(in_shape), {}
        drows = np.zeros((n * c, h // k, k, w // k), dtype=dout.dtype)
        np.put_along_axis(drows, ridx[:, :, None, :],
                          dout.reshape(n * c, h // k, 1, w // k), axis=2)
        dcols = np.zeros((n * c * h * (w // k), k), dtype=dout.dtype)
        np.put_along_axis(dcols, cidx[:, None], drows.reshape(-1, 1), axis=1)
        return dcols.reshape(in_shape), {}


class AvgPool2d(_Pool):
    kind = "avgpool"

    def forward(self, x, train=False, mutate=False):
        n, c, h, w = x.shape
        k = self.kernel
        if k == 2:
            cols = x.reshape(-1, 2)
            cmean = (cols[:, 0] + cols[:, 1]) * x.dtype.type(0.5)
            rows = cmean.reshape(n * c, h // 2, 2, w // 2)
            y = (rows[:, :, 0, :] + rows[:, :, 1, :]) * x.dtype.type(0.5)
            return y.reshape(n, c, h // 2, w // 2), x.shape
        cmean = np.mean(x.reshape(-1, k), axis=1, dtype=np.float64)
        rows = cmean.reshape(n * c, h // k, k, w // k)
        y = np.mean(rows, axis=2, dtype=np.float64).astype(x.dtype)
        return y.reshape(n, c, h // k, w // k), x.shape

    def backward(self, dout, cache, want_param_grads=True):
        n, c, h, w = cache
        k = self.kernel
        d = (dout / (k * k)).reshape(n * c, h // k, 1, w // k)
        drows = np.broadcast_to(d, (n * c, h // k, k, w // k)).reshape(-1, 1)
        dx = np.broadcast_to(drows, (drows.shape[0], k))
        return np.ascontiguousarray(dx).reshape(cache), {}


class BatchNorm(Layer):
    """Batch normalization over channels (4D input) or features (2D input).

    Running statistics live in `state` and are updated by exponential
    moving average only when forward runs with train=True and mutate=True;
    eval mode normalizes with the stored statistics and never writes them.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features, dtype=np.float32)
        self.params["beta"] = np.zeros(num_features, dtype=np.float32)
        self.state["running_mean"] = np.zeros(num_features, dtype=np.float32)
        self.state["running_var"] = np.ones(num_features, dtype=np.float32)

    def out_shape(self, in_shape):
        if in_shape[0] != self.num_features:
            raise ShapeError(f"batchnorm expects {self.num_features} channels, got {in_shape}")
        return in_shape

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, train=False, mutate=False):
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        g = self._bcast(self.params["gamma"].astype(x.dtype), x.ndim)
        b = self._bcast(self.params["beta"].astype(x.dtype), x.ndim)
        if train:
            mu = np.mean(x, axis=axes, dtype=np.float64)
            xc = x - self._bcast(mu.astype(x.dtype), x.ndim)
            var = np.mean(xc * xc, axis=axes, dtype=np.float64)
            inv = self._bcast((1.0 / np.sqrt(var + self.eps)).astype(x.dtype), x.ndim)
            xhat = xc * inv
            if mutate:
                m = self.momentum
                self.state["running_mean"] = (
                    (1 - m) * self.state["running_mean"] + m * mu.astype(np.float32))
                self.state["running_var"] = (
                    (1 - m) * self.state["running_var"] + m * var.astype(np.float32))
            cache = ("train", xhat, inv, axes)
        else:
            mu = self._bcast(self.state["running_mean"].astype(x.dtype), x.ndim)
            inv = self._bcast(
                (1.0 / np.sqrt(self.state["running_var"].astype(np.float64) + self.eps)
                 ).astype(x.dtype), x.ndim)
            xhat = (x - mu) * inv
            cache = ("eval", xhat, inv, axes)
        return g * xhat + b, cache

    def backward(self, dout, cache, want_param_grads=True):
        mode, xhat, inv, axes = cache
        g = self._bcast(self.params["gamma"].astype(dout.dtype), dout.ndim)
        grads = {}
        if want_param_grads:
            grads["gamma"] = _sum_to(dout * xhat, axes, self.params["gamma"])
            grads["beta"] = _sum_to(dout, axes, self.params["beta"])
        if mode == "eval":
            return dout * g * inv, grads
        m = dout.shape[0] if len(axes) == 1 else dout.shape[0] * dout.shape[2] * dout.shape[3]
        dsum = np.sum(dout, axis=axes, keepdims=True, dtype=np.float64).astype(dout.dtype)
        dxsum = np.sum(dout * xhat, axis=axes, keepdims=True, dtype=np.float64).astype(dout.dtype)
        dx = (g * inv / m) * (m * dout - dsum - xhat * dxsum)
        return dx, grads

    def spec(self):
        return {"kind": self.kind, "num_features": self.num_features,
                "eps": self.eps, "momentum": self.momentum}

    def param_order(self):
        return [("params", "gamma"), ("params", "beta"),
                ("state", "running_mean"), ("state", "running_var")]


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, mutate=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, want_param_grads=True):
        return dout.reshape(cache), {}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, mutate=False):
        e = np.exp(x - np.max(x, axis=-1, keepdims=True))
        p = e / np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return p, p

    def backward(self, dout, cache, want_param_grads=True):
        p = cache
        inner = np.sum(dout * p, axis=-1, keepdims=True, dtype=np.float64).astype(p.dtype)
        return p * (dout - inner), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, mutate=False):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        # keep strictly inside (0,1) even where the dtype would saturate
        fi = np.finfo(x.dtype)
        np.clip(s, fi.tiny, 1.0 - fi.epsneg, out=s)
        return s, s

    def backward(self, dout, cache, want_param_grads=True):
        s = cache
        return dout * s * (1.0 - s), {}


_LAYER_KINDS = {cls.kind: cls for cls in
                (Conv2d, Linear, ReLU, MaxPool2d, AvgPool2d, BatchNorm,
                 Flatten, Softmax, Sigmoid)}


def layer_from_spec(d):
    """Rebuild a layer from its spec() dict (parameters not restored here)."""
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _LAYER_KINDS[kind](**d)
