"""Shared test oracles: finite differences, loop-based layer semantics,
tiny datasets. Everything here is deliberately independent of the library
implementations it checks (plain loops, no layer reuse)."""

import numpy as np


def finite_difference(f, x, h=1e-3):
    """Central finite differences of scalar f at x, via a float64 shadow."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def assert_grads_close(g_ad, g_fd, rel=1e-3, floor=1e-2):
    g_ad = np.asarray(g_ad, dtype=np.float64)
    err = np.abs(g_ad - g_fd)
    denom = np.maximum(np.abs(g_ad) + np.abs(g_fd), floor)
    worst = np.max(err / denom)
    assert worst <= rel, f"gradient mismatch: worst relative error {worst:.3e}"


def scalar_conv2d(x, w, b, stride=1, padding=0):
    """Naive quadruple-loop convolution, one scalar at a time (float64)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        h, wd = h + 2 * padding, wd + 2 * padding
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    y = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (x[ni, ci, oi * stride + ki, oj * stride + kj]
                                        * w[fi, ci, ki, kj])
                    y[ni, fi, oi, oj] = acc + b[fi]
    return y


def scalar_maxpool(x, k):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // k, w // k))
    for ni in range(n):
        for ci in range(c):
            for oi in range(h // k):
                for oj in range(w // k):
                    y[ni, ci, oi, oj] = x[ni, ci, oi * k:(oi + 1) * k,
                                          oj * k:(oj + 1) * k].max()
    return y


def scalar_forward_two_layer_conv(x, w1, b1, w2, b2, pool=2):
    """conv -> relu -> maxpool -> conv -> relu, all via scalar loops."""
    h1 = scalar_conv2d(x, w1, b1, padding=1)
    h1 = np.maximum(h1, 0.0)
    h1 = scalar_maxpool(h1, pool)
    h2 = scalar_conv2d(h1, w2, b2, padding=1)
    return np.maximum(h2, 0.0)


def tiny_linear_dataset(seed=0):
    """Two linearly separable points for monotone-loss training checks."""
    rng = np.random.default_rng(seed)
    x = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32) * 200
    y = np.array([0, 1], dtype=np.int64)
    return x, y, rng
