"""Differentiable primitives.

Every op takes :class:`Tensor` (or plain arrays / python scalars where noted),
computes its value eagerly with numpy, and registers a backward closure on the
active tape.  Images are ``[B, C, H, W]``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, emit


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(kind, a, b, fwd, da, db):
    if np.isscalar(b) and not isinstance(a, (int, float)):
        a = as_tensor(a)
        s = float(b)
        return emit(kind, [a], fwd(a.data, s), lambda g: (da(g, a.data, s),))
    if np.isscalar(a):
        b = as_tensor(b)
        s = float(a)
        return emit(kind, [b], fwd(s, b.data), lambda g: (db(g, s, b.data),))
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from e
    return emit(
        kind,
        [a, b],
        out,
        lambda g: (
            _unbroadcast(da(g, a.data, b.data), a.shape),
            _unbroadcast(db(g, a.data, b.data), b.shape),
        ),
    )


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def square(x) -> Tensor:
    x = as_tensor(x)
    return emit("square", [x], x.data * x.data, lambda g: (2.0 * g * x.data,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return emit("sum", [x], np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return emit(
        "mean", [x], np.asarray(x.data.mean()), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return emit("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def concat(xs, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from e
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return emit("concat", xs, out, back)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return emit("silu", [x], x.data * s, lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def dense(x, w, b=None, act: str = "none") -> Tensor:
    """``act(x @ w + b)`` with ``x: [..., n]``, ``w: [n, m]``, ``b: [m]``."""
    if act not in ("none", "silu"):
        raise ValueError(f"unknown activation {act!r}")
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"dense: x {x.shape} incompatible with w {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not match w {w.shape}")
    xd = x.data.reshape(-1, w.shape[0])
    z = xd @ w.data
    if b is not None:
        z = z + b.data
    z = z.reshape(x.shape[:-1] + (w.shape[1],))
    inputs = [x, w] if b is None else [x, w, b]

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = xd.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    out = emit("dense", inputs, z, back)
    return silu(out) if act == "silu" else out


def dense_and_activation(x, w, b, act: str = "none") -> Tensor:
    return dense(x, w, b, act)


# -- convolution ---------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    """``[B, C, Hp, Wp]`` -> ``[C*k*k, B*ho*wo]`` (channel-major rows)."""
    bsz, c = xp.shape[:2]
    cols = np.empty((c, k, k, bsz, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + ho, j : j + wo]
    return cols.reshape(c * k * k, bsz * ho * wo)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> tuple:
    bsz = x.shape[0]
    cout, _, k, _ = w.shape
    xp = _pad(x, pad)
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    cols = _im2col(xp, k, ho, wo)
    y = w.reshape(cout, -1) @ cols
    return y.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3), cols


def conv2d(x, w, b=None, pad: int | None = None) -> Tensor:
    """Stride-1 cross-correlation.  ``pad`` defaults to shape-preserving."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d x and w, got {x.shape} and {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got w {w.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: x {x.shape} has {x.shape[1]} channels, w {w.shape} expects {cin}")
    if pad is None:
        pad = (k - 1) // 2
    if not 0 <= pad <= k - 1:
        raise ShapeError(f"conv2d: pad {pad} out of range for kernel {k}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match w {w.shape}")
    y, cols = _correlate(x.data, w.data, pad)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)
    inputs = [x, w] if b is None else [x, w, b]

    def back(g):
        g_cm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g_cm @ cols.T).reshape(w.shape)
        w_flip = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        gx, _ = _correlate(g, np.ascontiguousarray(w_flip), k - 1 - pad)
        gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    return emit("conv2d", inputs, y, back)


# -- resampling ----------------------------------------------------------------


def avg_pool2(x) -> Tensor:
    """Mean over non-overlapping 2x2 blocks."""
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size must be even, got {x.shape}")
    out = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (g4 * 0.25,)

    return emit("avg_pool2", [x], out, back)


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """``[2n, n]`` 1-d bilinear upsampling operator, half-pixel centres, edge clamp."""
    u = np.zeros((2 * n, n), dtype=dtype)
    for i in range(n):
        lo, hi = max(i - 1, 0), min(i + 1, n - 1)
        u[2 * i, i] += 0.75
        u[2 * i, lo] += 0.25
        u[2 * i + 1, i] += 0.75
        u[2 * i + 1, hi] += 0.25
    return u


def upsample2(x, mode: str = "bilinear") -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: expected [B, C, H, W], got {x.shape}")
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def back(g):
            b, c, h, w = g.shape
            return (g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    elif mode == "bilinear":
        uh = bilinear_matrix(x.shape[2], x.dtype)
        uw = bilinear_matrix(x.shape[3], x.dtype)
        out = np.einsum("ih,bchw,jw->bcij", uh, x.data, uw, optimize=True)

        def back(g):
            return (np.einsum("ih,bcij,jw->bchw", uh, g, uw, optimize=True),)

    else:
        raise ValueError(f"upsample2: unsupported mode {mode!r}")
    return emit("upsample2", [x], out, back)


# -- normalization ---------------------------------------------------------------


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bsz, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx_hat = (g * gamma.data[None, :, None, None]).reshape(bsz, groups, -1)
        xh = xhat.reshape(bsz, groups, -1)
        gx = inv * (
            gx_hat - gx_hat.mean(axis=2, keepdims=True) - xh * (gx_hat * xh).mean(axis=2, keepdims=True)
        )
        return gx.reshape(x.shape), ggamma, gbeta

    return emit("group_norm", [x, gamma, beta], out, back)


def add_channel_bias(x, v) -> Tensor:
    """``x[b, c, h, w] + v[b, c]``."""
    x, v = as_tensor(x), as_tensor(v)
    if v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel_bias: {v.shape} does not match {x.shape}")
    return emit(
        "add_channel_bias",
        [x, v],
        x.data + v.data[:, :, None, None],
        lambda g: (g, g.sum(axis=(2, 3))),
    )
