"""Differentiable primitives.

Every op saves only what its backward needs for the inputs that actually
require gradients; those saves are what the accountant measures.
"""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_op

LN_EPS = 1e-5
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def _need(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, saved):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_op("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, saved):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_op("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ra, rb = a.requires_grad, b.requires_grad
    sa, sb = a.shape, b.shape

    def bw(g, saved):
        it = iter(saved)
        bv = next(it) if ra else None
        av = next(it) if rb else None
        ga = _unbroadcast(g * bv.data, sa) if ra else None
        gb = _unbroadcast(g * av.data, sb) if rb else None
        return ga, gb

    def saves():
        return tuple(x for x, keep in ((b, ra), (a, rb)) if keep)

    return make_op("mul", a.data * b.data, (a, b), bw, saves)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ra, rb = a.requires_grad, b.requires_grad
    sa, sb = a.shape, b.shape

    def bw(g, saved):
        if rb:
            av, bv = saved
        else:
            (bv,) = saved
        ga = _unbroadcast(g / bv.data, sa) if ra else None
        gb = _unbroadcast(-g * av.data / (bv.data * bv.data), sb) if rb else None
        return ga, gb

    def saves():
        return (a, b) if rb else (b,)

    return make_op("div", a.data / b.data, (a, b), bw, saves)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g, s: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(g, saved):
        (x,) = saved
        return (g * p * np.power(x.data, p - 1.0),)

    return make_op("pow", np.power(a.data, p), (a,), bw, (a,))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g, saved):
        return (g * saved[0],)

    return make_op("exp", out, (a,), bw, lambda: (out,))


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g, saved):
        return (g / saved[0].data,)

    return make_op("log", np.log(a.data), (a,), bw, (a,))


# -- activations ------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)

    def bw(g, saved):
        y = saved[0]
        return (g * y * (1.0 - y),)

    return make_op("sigmoid", out, (a,), bw, lambda: (out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g, saved):
        y = saved[0]
        return (g * (1.0 - y * y),)

    return make_op("tanh", out, (a,), bw, lambda: (out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g, saved):
        return (g * (saved[0] > 0),)

    return make_op("relu", out, (a,), bw, lambda: (out,))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g, saved):
        xv = saved[0].data
        c = 0.5 * (1.0 + erf(xv * _SQRT1_2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (c + xv * pdf),)

    return make_op("gelu", x * cdf, (a,), bw, (a,))


# -- matrix products -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ra, rb = a.requires_grad, b.requires_grad
    sa, sb = a.shape, b.shape

    def bw(g, saved):
        it = iter(saved)
        bv = next(it) if ra else None
        av = next(it) if rb else None
        ga = _unbroadcast(g @ np.swapaxes(bv.data, -1, -2), sa) if ra else None
        gb = _unbroadcast(np.swapaxes(av.data, -1, -2) @ g, sb) if rb else None
        return ga, gb

    def saves():
        return tuple(x for x, keep in ((b, ra), (a, rb)) if keep)

    return make_op("matmul", out, (a, b), bw, saves)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", f"input features {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear", f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)
    rx, rw = x.requires_grad, weight.requires_grad
    xshape = x.shape

    def bw(g, saved):
        it = iter(saved)
        wv = next(it) if rx else None
        xv = next(it) if rw else None
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wv.data) if rx else None
        gw = (g2.T @ xv.data.reshape(-1, xshape[-1])) if rw else None
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0) if bias.requires_grad else None)
        return res

    def saves():
        return tuple(t for t, keep in ((weight, rx), (x, rw)) if keep)

    return make_op("linear", out, parents, bw, saves)


# -- reductions and shape ops ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bw(g, saved):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes])) if axes else 1

    def bw(g, saved):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_op("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return make_op("reshape", out, (a,), lambda g, s: (g.reshape(src),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(x % a.ndim for x in axes) != list(range(a.ndim)):
        raise ShapeError("permute", f"axes {axes} invalid for {a.ndim}-D input")
    inv = tuple(np.argsort(axes))
    return make_op("permute", np.transpose(a.data, axes), (a,),
                   lambda g, s: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return permute(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g, saved):
        return np.split(g, bounds, axis=axis)

    return make_op("concat", out, ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError("split", f"sizes {list(sizes)} do not sum to dim {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        key = [slice(None)] * a.ndim
        key[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(key)))
        start += n
    return out


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g, saved):
        gz = np.zeros(shape, dtype=DTYPE)
        np.add.at(gz, key, g)
        return (gz,)

    return make_op("getitem", a.data[key], (a,), bw)


def gather(a, index: np.ndarray, axis: int) -> Tensor:
    """``take_along_axis``; ``index`` broadcasts against ``a``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != a.ndim:
        raise ShapeError("gather", f"index ndim {index.ndim} != input ndim {a.ndim}")
    out = np.take_along_axis(a.data, index, axis=axis)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g, saved):
        idx = np.broadcast_to(saved[0], g.shape)
        grids = list(np.meshgrid(*[np.arange(n) for n in g.shape], indexing="ij", sparse=True))
        grids[ax] = idx
        gz = np.zeros(shape, dtype=DTYPE)
        np.add.at(gz, tuple(grids), g)
        return (gz,)

    return make_op("gather", out, (a,), bw, (index,))


# -- normalization and softmax family ------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, saved):
        y = saved[0]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (a,), bw, lambda: (out,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g, saved):
        p = np.exp(saved[0])
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (a,), bw, lambda: (out,))


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy of [N, K] logits against integer targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs targets {t.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), t].mean()
    probs = np.exp(logp)

    def bw(g, saved):
        p = saved[0].copy()
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return make_op("cross_entropy", np.asarray(loss), (logits,), bw, lambda: (probs,))


def _norm_backward(g, xhat, rstd, axis):
    m = g.mean(axis=axis, keepdims=True)
    mx = (g * xhat).mean(axis=axis, keepdims=True)
    return rstd * (g - m - xhat * mx)


def layer_norm(x, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then optionally apply ``gamma``/``beta``."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (d,):
            raise ShapeError("layer_norm", f"gamma shape {gamma.shape} != ({d},)")
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (d,):
            raise ShapeError("layer_norm", f"beta shape {beta.shape} != ({d},)")
        out = out + beta.data
        parents.append(beta)
    rx = x.requires_grad
    rg = gamma is not None and gamma.requires_grad
    red = tuple(range(x.ndim - 1))

    def bw(g, saved):
        it = iter(saved)
        xh = next(it) if (rx or rg) else None
        rs = next(it) if rx else None
        gv = next(it) if (rx and gamma is not None) else None
        res = []
        if rx:
            gx_hat = g * gv.data if gv is not None else g
            res.append(_norm_backward(gx_hat, xh, rs, -1))
        else:
            res.append(None)
        if gamma is not None:
            res.append((g * xh).sum(axis=red) if rg else None)
        if beta is not None:
            res.append(g.sum(axis=red) if beta.requires_grad else None)
        return res

    def saves():
        s = []
        if rx or rg:
            s.append(xhat)
        if rx:
            s.append(rstd)
            if gamma is not None:
                s.append(gamma)
        return tuple(s)

    return make_op("layer_norm", out, parents, bw, saves)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Group normalization of an NCHW tensor, affine per channel."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("group_norm", f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError("group_norm", f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(n, c, h, w)
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data.reshape(1, c, 1, 1)
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data.reshape(1, c, 1, 1)
        parents.append(beta)
    rx = x.requires_grad
    rg = gamma is not None and gamma.requires_grad

    def bw(g, saved):
        it = iter(saved)
        xh = next(it) if (rx or rg) else None
        rs = next(it) if rx else None
        gv = next(it) if (rx and gamma is not None) else None
        res = []
        if rx:
            gx_hat = g * gv.data.reshape(1, c, 1, 1) if gv is not None else g
            gx = _norm_backward(gx_hat.reshape(n, groups, -1), xh.reshape(n, groups, -1), rs, -1)
            res.append(gx.reshape(n, c, h, w))
        else:
            res.append(None)
        if gamma is not None:
            res.append((g * xh).sum(axis=(0, 2, 3)) if rg else None)
        if beta is not None:
            res.append(g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)
        return res

    def saves():
        s = []
        if rx or rg:
            s.append(xhat)
        if rx:
            s.append(rstd)
            if gamma is not None:
                s.append(gamma)
        return tuple(s)

    return make_op("group_norm", out, parents, bw, saves)


# -- spatial ops ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, kh, kw]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """NCHW convolution; ``weight`` is [O, C/groups, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups or c // groups != cg:
        raise ShapeError("conv2d", f"input channels {c} / groups {groups} incompatible with weight {weight.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    og = o // groups

    def _forward_cols(xdata):
        xp = np.pad(xdata, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xdata
        win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
        return win.reshape(n, groups, cg, ho, wo, kh, kw)

    wg = weight.data.reshape(groups, og, cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", _forward_cols(x.data), wg, optimize=True)
    out = out.reshape(n, o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)
    rx, rw = x.requires_grad, weight.requires_grad

    def bw(g, saved):
        it = iter(saved)
        wv = next(it) if rx else None
        xv = next(it) if rw else None
        gg = g.reshape(n, groups, og, ho, wo)
        res = [None, None]
        if rx:
            wgv = wv.data.reshape(groups, og, cg, kh, kw)
            gcols = np.einsum("ngohw,gocij->ngchwij", gg, wgv, optimize=True)
            gp = np.zeros((n, groups, cg, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
            gp = gp.reshape(n, c, h + 2 * padding, w + 2 * padding)
            res[0] = gp[:, :, padding:padding + h, padding:padding + w] if padding else gp
        if rw:
            gw = np.einsum("ngohw,ngchwij->gocij", gg, _forward_cols(xv.data), optimize=True)
            res[1] = gw.reshape(o, cg, kh, kw)
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return res

    def saves():
        return tuple(t for t, keep in ((weight, rx), (x, rw)) if keep)

    return make_op("conv2d", out, parents, bw, saves)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    k = int(kernel)
    if h % k or w % k:
        raise ShapeError("avg_pool2d", f"spatial dims {h}x{w} not divisible by kernel {k}")
    if k == 1:
        return x
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g, saved):
        gx = np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3)
        return (gx,)

    return make_op("avg_pool2d", out, (x,), bw)


def upsample_nearest(x, size: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = int(size[0]), int(size[1])
    if (oh, ow) == (h, w):
        return x
    ih = (np.arange(oh) * h) // oh
    iw = (np.arange(ow) * w) // ow
    out = x.data[:, :, ih][:, :, :, iw]

    def bw(g, saved):
        g1 = np.zeros((n, c, oh, w), dtype=DTYPE)
        np.add.at(g1, (slice(None), slice(None), slice(None), iw), g)
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        np.add.at(gx, (slice(None), slice(None), ih), g1)
        return (gx,)

    return make_op("upsample_nearest", out, (x,), bw)


# -- composites ---------------------------------------------------------------------------

def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    # eps bounds the norm from below, so it enters squared.
    norm = sqrt(add(sum(mul(x, x), axis=axis, keepdims=True), eps * eps))
    return div(x, norm)


def tokens_to_grid(x, h: int, w: int) -> Tensor:
    """[B, H*W, D] -> [B, D, H, W]."""
    b, t, d = x.shape
    if t != h * w:
        raise ShapeError("tokens_to_grid", f"{t} tokens cannot form a {h}x{w} grid")
    return permute(reshape(x, (b, h, w, d)), (0, 3, 1, 2))


def grid_to_tokens(x) -> Tensor:
    """[B, D, H, W] -> [B, H*W, D]."""
    b, d, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 1)), (b, h * w, d))


def square_side(tokens: int) -> int:
    s = int(round(math.sqrt(tokens)))
    if s * s != tokens:
        raise ShapeError("grid", f"token count {tokens} is not a perfect square")
    return s


# -- sparse line mixing ---------------------------------------------------------------------

def _line_shift_index(w: int, sign: int) -> np.ndarray:
    """idx[i, k] = (k + sign * i) mod w, shaped [1, 1, w, w] for take_along_axis."""
    i = np.arange(w)[:, None]
    k = np.arange(w)[None, :]
    return ((k + sign * i) % w).reshape(1, 1, w, w)


def line_mix(x, row, col, diag, anti, weights) -> Tensor:
    """Fused four-direction token mixing plus identity, blended by ``weights``.

    ``x`` is [B, D, H, W] with H == W. Row/col mixing is shared across parallel
    lines; the diagonal paths shift row i cyclically by -i (main) or +i (anti),
    mix along columns, and shift back. ``weights`` holds 5 blend coefficients
    ordered (row, col, diag, anti, identity). Only ``x`` (plus the weight
    tensors) is kept for backward; path outputs are recomputed.
    """
    x = as_tensor(x)
    row, col, diag, anti, weights = (as_tensor(t) for t in (row, col, diag, anti, weights))
    if x.ndim != 4:
        raise ShapeError("line_mix", f"expected [B, D, H, W], got {x.shape}")
    h, w = x.shape[2:]
    if h != w:
        raise ShapeError("line_mix", f"grid must be square, got {h}x{w}")
    for name, m in (("row", row), ("col", col), ("diag", diag), ("anti", anti)):
        if m.shape != (w, w):
            raise ShapeError("line_mix", f"{name} matrix {m.shape} != ({w}, {w})")
    if weights.shape != (5,):
        raise ShapeError("line_mix", f"weights shape {weights.shape} != (5,)")
    sd, ud = _line_shift_index(w, +1), _line_shift_index(w, -1)  # main diagonal shift / unshift
    sa, ua = _line_shift_index(w, -1), _line_shift_index(w, +1)  # anti diagonal shift / unshift

    def paths(xv, R, C, Dg, A):
        p_row = xv @ R.T
        p_col = C @ xv
        s_d = np.take_along_axis(xv, sd, axis=-1)
        p_diag = np.take_along_axis(Dg @ s_d, ud, axis=-1)
        s_a = np.take_along_axis(xv, sa, axis=-1)
        p_anti = np.take_along_axis(A @ s_a, ua, axis=-1)
        return (p_row, p_col, p_diag, p_anti, xv), (s_d, s_a)

    (pr, pc, pd, pa, pi), _ = paths(x.data, row.data, col.data, diag.data, anti.data)
    wv = weights.data
    out = wv[0] * pr + wv[1] * pc + wv[2] * pd + wv[3] * pa + wv[4] * pi
    parents = (x, row, col, diag, anti, weights)

    def _sum_outer_last(a, b):
        # sum over leading axes of a[..., i, :]^T b[..., j, :] style products
        return np.einsum("...hi,...hj->ij", a, b, optimize=True)

    def bw(g, saved):
        xs, R, C, Dg, A, wts = saved
        xv, wvv = xs.data, wts.data
        (p_row, p_col, p_diag, p_anti, p_id), (s_d, s_a) = paths(xv, R.data, C.data, Dg.data, A.data)
        gx = wvv[4] * g if x.requires_grad else None
        res_m = [None] * 4
        # row: y = x R^T
        gr = wvv[0] * g
        if row.requires_grad:
            res_m[0] = _sum_outer_last(gr, xv)
        if gx is not None:
            gx = gx + gr @ R.data
        # col: y = C x
        gc = wvv[1] * g
        if col.requires_grad:
            res_m[1] = np.einsum("...iw,...jw->ij", gc, xv, optimize=True)
        if gx is not None:
            gx = gx + C.data.T @ gc
        # diagonals: y = U (M S x); adjoint of U is S
        for slot, wi, M, s_idx, u_idx, shifted in (
            (2, 2, Dg, sd, ud, s_d), (3, 3, A, sa, ua, s_a),
        ):
            gm = np.take_along_axis(wvv[wi] * g, s_idx, axis=-1)
            if parents[1 + slot].requires_grad:
                res_m[slot] = np.einsum("...iw,...jw->ij", gm, shifted, optimize=True)
            if gx is not None:
                gx = gx + np.take_along_axis(M.data.T @ gm, u_idx, axis=-1)
        gw = None
        if weights.requires_grad:
            gw = np.array([(g * p).sum() for p in (p_row, p_col, p_diag, p_anti, p_id)])
        return [gx, *res_m, gw]

    def saves():
        return (x, row, col, diag, anti, weights)

    return make_op("line_mix", out, parents, bw, saves)
