"""Differentiable operations on :class:`~lbnet.engine.tensor.Tensor`.

All image-like tensors are NCHW.  Convolution is cross-correlation with zero
padding.  Binary elementwise ops accept equal shapes, or an attention map of
shape ``(N, C, 1, 1)`` / ``(N, 1, H, W)`` broadcast against ``(N, C, H, W)``;
nothing else broadcasts.
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from lbnet.engine.tensor import Tensor, _local, make_result
from lbnet.errors import ConfigError, DimensionError

__all__ = [
    "conv2d", "linear", "matmul", "matmul_batched", "softmax", "layer_norm", "pixel_shuffle",
    "pool_stats", "add", "sub", "mul", "scale", "relu", "sigmoid", "gelu",
    "abs", "concat", "split", "reshape", "permute", "sum", "mean",
    "unfold_tokens", "fold_tokens", "count_macs",
]


# ---------------------------------------------------------------------------
# Multiply-accumulate accounting
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed inside the block, per op family.

    Yields a :class:`collections.Counter` with keys ``conv``, ``linear`` and
    ``matmul``.
    """
    counter = Counter()
    stack = getattr(_local, "mac_counters", None)
    if stack is None:
        stack = _local.mac_counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _tally(kind: str, macs: int) -> None:
    for counter in getattr(_local, "mac_counters", ()):
        counter[kind] += int(macs)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_axes(a_shape: tuple, b_shape: tuple) -> tuple:
    """Return the axes along which the smaller operand is broadcast (possibly empty)."""
    if a_shape == b_shape:
        return ()
    if len(a_shape) == 4 and len(b_shape) == 4:
        for big, small in ((a_shape, b_shape), (b_shape, a_shape)):
            n, c, h, w = big
            if small == (n, c, 1, 1) and (h, w) != (1, 1):
                return (2, 3)
            if small == (n, 1, h, w) and c != 1:
                return (1,)
    for axis, (x, y) in enumerate(zip(a_shape, b_shape)):
        if x != y:
            raise DimensionError(f"shapes {a_shape} and {b_shape} differ on axis {axis}", axis=axis)
    raise DimensionError(f"shapes {a_shape} and {b_shape} have different ranks")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (x, y) in enumerate(zip(g.shape, shape)) if y == 1 and x != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_axes(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_axes(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_axes(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), bw)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return make_result(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_result(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise DimensionError(f"concat rank mismatch: {ref} vs {t.shape}")
        for ax, (x, y) in enumerate(zip(ref, t.shape)):
            if ax != axis and x != y:
                raise DimensionError(f"concat extent mismatch on axis {ax}: {ref} vs {t.shape}", axis=ax)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    axis = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}", axis=axis)
    outs, start = [], 0
    for size in sizes:
        lo, hi = start, start + size
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)
        shape = x.shape

        def bw(g, index=index, shape=shape):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        outs.append(make_result(x.data[index], (x,), bw))
        start = hi
    return outs


# ---------------------------------------------------------------------------
# Convolution and linear maps
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and grouped channels."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be (Cout, Cin/g, k, k), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be positive and padding non-negative (got {stride}, {padding})")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernel must be square with odd size, got {kh}x{kw}")
    if cg != cin // groups:
        raise DimensionError(
            f"conv2d weight expects {cg * groups} input channels, input has {cin}", axis=1)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}", axis=0)
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} does not fit input {h}x{w} with padding {padding}",
                             axis=2 if ho < 1 else 3)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wd = weight.data
    og = cout // groups
    if groups == 1:
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        wg = win.reshape(n, groups, cg, ho, wo, k, k)
        wt = wd.reshape(groups, og, cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", wg, wt, optimize=True).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _tally("conv", n * k * k * cg * cout * ho * wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    want_x, want_w = x.requires_grad, weight.requires_grad

    def bw(g):
        gx = gw = None
        if groups == 1:
            if want_w:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if want_x:
                dcols = np.tensordot(g, wd, axes=([1], [0]))  # (n, ho, wo, cin, k, k)
        else:
            gg = g.reshape(n, groups, og, ho, wo)
            if want_w:
                gw = np.einsum("ngohw,ngchwij->gocij", gg, wg, optimize=True).reshape(cout, cg, k, k)
            if want_x:
                dcols = np.einsum("ngohw,gocij->nhwgcij", gg, wt, optimize=True).reshape(
                    n, ho, wo, cin, k, k)
        if want_x:
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be (Dout, Din), got {weight.shape}")
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise DimensionError(f"linear expects last extent {din}, got {x.shape[-1]}", axis=x.ndim - 1)
    if bias is not None and bias.shape != (dout,):
        raise DimensionError(f"linear bias must have shape ({dout},), got {bias.shape}", axis=0)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    tokens = xd.size // din
    _tally("linear", tokens * din * dout)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, din)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, inputs, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., M, K) @ (..., K, P)`` with equal batch extents."""
    if a.ndim < 2 or b.ndim != a.ndim:
        raise DimensionError(f"matmul needs equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        for ax, (x, y) in enumerate(zip(a.shape[:-2], b.shape[:-2])):
            if x != y:
                raise DimensionError(f"matmul batch extents differ on axis {ax}: {a.shape} vs {b.shape}",
                                     axis=ax)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}", axis=a.ndim - 1)
    ad, bd = a.data, b.data
    m, kk = ad.shape[-2:]
    batch = ad.size // (m * kk)
    _tally("matmul", batch * m * kk * bd.shape[-1])
    return make_result(ad @ bd, (a, b),
                       lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


matmul_batched = matmul


# ---------------------------------------------------------------------------
# Normalisation and attention primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine parameters must have shape ({d},), got {gamma.shape} and {beta.shape}",
            axis=x.ndim - 1)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, d)
        return gx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0)

    return make_result(xhat * gd + beta.data, (x, gamma, beta), bw)


def pool_stats(x: Tensor, kind: str) -> Tensor:
    """Pooled statistics for attention gates.

    Args:
        x: ``(N, C, H, W)`` tensor.
        kind: ``"global_avg"`` -> ``(N, C, 1, 1)``; ``"channel_avg"`` or
            ``"channel_max"`` -> ``(N, 1, H, W)``.  Max gradients route to the
            first (lowest-index) maximal channel.
    """
    if x.ndim != 4:
        raise DimensionError(f"pool_stats expects NCHW, got {x.shape}")
    xd = x.data
    shape = x.shape
    if kind == "global_avg":
        hw = shape[2] * shape[3]
        return make_result(xd.mean(axis=(2, 3), keepdims=True), (x,),
                           lambda g: (np.broadcast_to(g / hw, shape),))
    if kind == "channel_avg":
        c = shape[1]
        return make_result(xd.mean(axis=1, keepdims=True), (x,),
                           lambda g: (np.broadcast_to(g / c, shape),))
    if kind == "channel_max":
        idx = np.argmax(xd, axis=1)[:, None]

        def bw(g):
            full = np.zeros(shape)
            np.put_along_axis(full, idx, g, axis=1)
            return (full,)

        return make_result(np.take_along_axis(xd, idx, axis=1), (x,), bw)
    raise ConfigError(f"unknown pooling kind {kind!r}")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(N, C*r*r, H, W)`` into ``(N, C, H*r, W*r)``."""
    if x.ndim != 4:
        raise DimensionError(f"pixel_shuffle expects NCHW, got {x.shape}")
    n, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise ConfigError(f"channel count {crr} is not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, crr, h, w),)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------------------
# Token layout for the transformer
# ---------------------------------------------------------------------------

def _fold_sum(cols: np.ndarray, n: int, c: int, h: int, w: int, k: int) -> np.ndarray:
    """Scatter-add (n, h*w, c*k*k) patch vectors back onto an (n, c, h, w) grid."""
    p = k // 2
    cols = cols.reshape(n, h, w, c, k, k)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, p:p + h, p:p + w]


def _unfold(xd: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = xd.shape
    p = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)


def _overlap_counts(h: int, w: int, k: int) -> np.ndarray:
    return _fold_sum(_unfold(np.ones((1, 1, h, w)), k), 1, 1, h, w, k)


def unfold_tokens(x: Tensor, k: int) -> Tensor:
    """Turn ``(N, C, H, W)`` into ``(N, H*W, C*k*k)`` zero-padded k x k patch tokens.

    Token order is row-major over spatial positions; the feature axis is
    ordered (channel, kernel row, kernel column).
    """
    if x.ndim != 4:
        raise DimensionError(f"unfold_tokens expects NCHW, got {x.shape}")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"token kernel must be odd and positive, got {k}")
    n, c, h, w = x.shape
    return make_result(_unfold(x.data, k), (x,), lambda g: (_fold_sum(g, n, c, h, w, k),))


def fold_tokens(t: Tensor, channels: int, height: int, width: int, k: int,
                average: bool = True) -> Tensor:
    """Inverse layout of :func:`unfold_tokens`.

    Overlapping patch entries are summed; with ``average`` each pixel is then
    divided by the number of patches covering it, so
    ``fold_tokens(unfold_tokens(x)) == x`` exactly.
    """
    n = t.shape[0]
    if t.shape != (n, height * width, channels * k * k):
        raise DimensionError(
            f"fold_tokens expects ({n}, {height * width}, {channels * k * k}), got {t.shape}")
    counts = _overlap_counts(height, width, k) if average else np.ones((1, 1, height, width))
    out = _fold_sum(t.data, n, channels, height, width, k) / counts
    return make_result(out, (t,), lambda g: (_unfold(g / counts, k),))
