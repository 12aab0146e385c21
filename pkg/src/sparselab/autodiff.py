"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Var` wraps an ndarray and remembers how it was produced; `backward`
walks the tape in reverse topological order and accumulates gradients.
The engine is strictly first order: anything second order in the package
is built from finite differences of these gradients.

Ops preserve the dtype of their inputs, so the same graph runs in f32 for
training and in f64 when a test wants a high-precision oracle.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Var:
    __slots__ = ("value", "grad", "_parents", "_backprop")

    def __init__(self, value, parents=(), backprop=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = parents
        self._backprop = backprop

    @property
    def shape(self):
        return self.value.shape


def backward(root: Var) -> None:
    """Accumulate gradients of `root` (a scalar) into every tape node."""
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backprop is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backprop(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(out, (a, b), back)


def mul(a: Var, b: Var) -> Var:
    out = a.value * b.value

    def back(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(out, (a, b), back)


def scale(a: Var, c: float) -> Var:
    c = a.value.dtype.type(c)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    out = np.matmul(a.value, b.value)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Var(out, (a, b), back)


def relu(a: Var) -> Var:
    keep = a.value > 0
    return Var(np.where(keep, a.value, a.value.dtype.type(0)), (a,), lambda g: (g * keep,))


def reshape(a: Var, shape: tuple) -> Var:
    orig = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def swap_last2(a: Var) -> Var:
    return Var(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def mean_axis(a: Var, axis: int) -> Var:
    n = a.value.shape[axis]
    out = a.value.mean(axis=axis)

    def back(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return Var(out, (a,), back)


def softmax_last(a: Var) -> Var:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((g - (g * p).sum(axis=-1, keepdims=True)) * p,)

    return Var(p, (a,), back)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalization over the last axis with trainable scale and shift."""
    v = x.value
    n = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    inv = inv.astype(v.dtype)
    xhat = xc * inv
    out = gamma.value * xhat + beta.value

    def back(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.value.shape)
        dbeta = g.sum(axis=reduce_axes).reshape(beta.value.shape)
        dxhat = g * gamma.value
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = -(dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / n) * xc.sum(
            axis=-1, keepdims=True
        )
        dx = dxhat * inv + dvar * (2.0 / n) * xc + dmu / n
        return dx.astype(v.dtype), dgamma, dbeta

    return Var(out, (x, gamma, beta), back)


def take_rows(a: Var, n: int) -> Var:
    """First n rows; gradient scatters back into the full table."""
    out = a.value[:n]

    def back(g):
        ga = np.zeros_like(a.value)
        ga[:n] = g
        return (ga,)

    return Var(out, (a,), back)


def embedding(table: Var, ids: np.ndarray) -> Var:
    out = table.value[ids]

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (gt,)

    return Var(out, (table,), back)


_conv_index_cache: dict = {}


def _conv_indices(C: int, hp: int, wp: int, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """Flat gather indices turning a padded (C, hp, wp) map into im2col rows."""
    key = (C, hp, wp, kh, kw, ho, wo)
    idx = _conv_index_cache.get(key)
    if idx is None:
        c = np.arange(C)[:, None, None, None, None]
        ki = np.arange(kh)[None, :, None, None, None]
        kj = np.arange(kw)[None, None, :, None, None]
        oi = np.arange(ho)[None, None, None, :, None]
        oj = np.arange(wo)[None, None, None, None, :]
        idx = (c * hp * wp + (ki + oi) * wp + (kj + oj)).reshape(C * kh * kw, ho * wo)
        _conv_index_cache[key] = idx
    return idx


def conv2d(x: Var, w: Var, b: Var, pad: int = 1) -> Var:
    """Stride-1 2D convolution via im2col; x (B,C,H,W), w (O,C,kH,kW), b (O,)."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d shapes {xv.shape} x {wv.shape}")
    B, C, H, W = xv.shape
    O, _, kh, kw = wv.shape
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = H + 2 * pad, W + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    idx = _conv_indices(C, hp, wp, kh, kw, ho, wo)
    cols = xp.reshape(B, C * hp * wp)[:, idx]  # (B, C*kh*kw, ho*wo)
    w2 = wv.reshape(O, C * kh * kw)
    out = (np.matmul(w2, cols) + b.value[None, :, None]).reshape(B, O, ho, wo)

    def back(g):
        g2 = g.reshape(B, O, ho * wo)
        gw = np.einsum("bol,bkl->ok", g2, cols).reshape(wv.shape)
        gcols = np.matmul(w2.T, g2).reshape(B, C, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki : ki + ho, kj : kj + wo] += gcols[:, :, ki, kj]
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Var(out, (x, w, b), back)


def avg_pool2d(x: Var, k: int = 2) -> Var:
    B, C, H, W = x.value.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    v = x.value.reshape(B, C, H // k, k, W // k, k)
    out = v.mean(axis=(3, 5))

    def back(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(x.value.dtype),)

    return Var(out, (x,), back)


def dropout(x: Var, p: float, uniforms: np.ndarray) -> Var:
    """Inverted dropout; `uniforms` supplies one draw per element."""
    keep = (uniforms.reshape(x.value.shape) >= p).astype(x.value.dtype) / x.value.dtype.type(
        1.0 - p
    )
    return Var(x.value * keep, (x,), lambda g: (g * keep,))


def cross_entropy_mean(logits: Var, labels: np.ndarray, eps: float = 0.0) -> Var:
    """Mean cross-entropy over the batch against (optionally smoothed) targets.

    With smoothing eps the target puts 1-eps on the label and eps/C uniformly.
    """
    z = logits.value
    B, C = z.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ShapeError("label out of range")
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    target = np.full((B, C), eps / C, dtype=z.dtype)
    target[np.arange(B), labels] += z.dtype.type(1.0 - eps)
    out = np.asarray(-(target * logp).sum() / B, dtype=z.dtype)

    def back(g):
        p = np.exp(logp)
        return (g * (p - target) / z.dtype.type(B),)

    return Var(out, (logits,), back)


def check_finite(value: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(value)):
        from .errors import NonFiniteError

        raise NonFiniteError(f"non-finite values in {what}")
