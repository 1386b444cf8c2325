"""Differentiable operations on :class:`~neurotse.tensor.Tensor`.

Each op computes its forward with numpy and registers a closure that maps
the output gradient to input gradients.  Broadcasting is supported for the
elementwise ops; gradients are summed back to the operand shapes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .errors import DimensionError, DomainError, InputTooShortError, ParameterError
from .tensor import Tensor, as_tensor

EXP_CLAMP = 700.0


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (0.5 * g / out,))


def exp(x) -> Tensor:
    """exp with the argument clamped at 700 so results stay finite."""
    x = as_tensor(x)
    out = np.exp(np.minimum(x.data, EXP_CLAMP))
    mask = x.data <= EXP_CLAMP
    return Tensor._make(out, (x,), lambda g: (g * out * mask,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of non-positive value")
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = expit(xd)
    return Tensor._make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._make(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return Tensor._make(t, (x,), lambda g: (g * (1.0 - t * t),))


def prelu(x, alpha) -> Tensor:
    """max(0, x) + alpha * min(0, x); alpha broadcasts against the last axis."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    xd, ad = x.data, alpha.data
    pos = xd > 0

    def back(g):
        gx = g * np.where(pos, 1.0, ad)
        ga = _unbroadcast(g * np.where(pos, 0.0, xd), ad.shape) if alpha.requires_grad else None
        return gx, ga

    return Tensor._make(np.where(pos, xd, ad * xd), (x, alpha), back)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def back(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._make(np.matmul(ad, bd), (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias, weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- shape manipulation ----------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._make(out.copy(), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes).copy(), (x,),
                        lambda g: (np.transpose(g, inv).copy(),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    return Tensor._make(np.flip(x.data, ax).copy(), (x,), lambda g: (np.flip(g, ax).copy(),))


def concat(xs, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    (ax,) = _norm_axes(axis, xs[0].ndim)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                i != ax and n != m for i, (n, m) in enumerate(zip(x.shape, xs[0].shape))):
            raise DimensionError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {ax}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._make(np.concatenate([x.data for x in xs], axis=ax), xs, back)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._make(x.data[idx].copy(), (x,), back)


def split(x, sizes, axis: int) -> list:
    out, start = [], 0
    for n in sizes:
        out.append(slice_axis(x, axis, start, start + n))
        start += n
    return out


def pad(x, axis: int, before: int, after: int) -> Tensor:
    """Zero padding along one axis."""
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    widths = [(0, 0)] * x.ndim
    widths[ax] = (before, after)
    n = x.shape[ax]

    def back(g):
        return (np.take(g, np.arange(before, before + n), axis=ax),)

    return Tensor._make(np.pad(x.data, widths), (x,), back)


# -- normalization / probabilistic ------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return Tensor._make(s, (x,), back)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [x]
    gd = bd = None
    if gain is not None:
        gain = as_tensor(gain)
        gd = gain.data
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        bd = bias.data
        parents.append(bias)
    out = xhat if gd is None else xhat * gd
    if bd is not None:
        out = out + bd
    n = xd.shape[-1]

    def back(g):
        gh = g if gd is None else g * gd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [gx]
        lead = g.reshape(-1, n)
        if gain is not None:
            grads.append((lead * xhat.reshape(-1, n)).sum(axis=0).reshape(gd.shape))
        if bias is not None:
            grads.append(lead.sum(axis=0).reshape(bd.shape))
        return tuple(grads)

    return Tensor._make(out, parents, back)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, kept units scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


# -- convolutions ------------------------------------------------------------

def _frames(x: np.ndarray, length: int, stride: int, n_out: int) -> np.ndarray:
    """Read-only strided view (..., n_out, length) over the last axis."""
    s = x.strides
    return as_strided(x, shape=x.shape[:-1] + (n_out, length),
                      strides=s[:-1] + (s[-1] * stride, s[-1]), writeable=False)


def _overlap_add(frames: np.ndarray, stride: int, total: int) -> np.ndarray:
    """Inverse of ``_frames``: sum (..., n, L) frames into a (..., total) signal."""
    n, length = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (total,))
    for j in range(length):
        out[..., j:j + stride * (n - 1) + 1:stride] += frames[..., j]
    return out


def conv1d(x, w, stride: int = 1) -> Tensor:
    """Cross-correlation of x (B, C_in, T) with w (C_out, C_in, L)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    T, L = x.shape[-1], w.shape[-1]
    if T < L:
        raise InputTooShortError(f"conv1d: input length {T} shorter than kernel {L}")
    n_out = (T - L) // stride + 1
    xd, wd = x.data, w.data
    fr = _frames(xd, L, stride, n_out)  # (B, Cin, n_out, L)
    out = np.einsum("bctl,ocl->bot", fr, wd, optimize=True)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gfr = np.einsum("bot,ocl->bctl", g, wd, optimize=True)
            gx = _overlap_add(gfr, stride, T)
        if w.requires_grad:
            gw = np.einsum("bot,bctl->ocl", g, fr, optimize=True)
        return gx, gw

    return Tensor._make(out, (x, w), back)


def conv_transpose1d(y, w, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d`: maps (B, C_out, T_in) to (B, C_in, (T_in-1)*stride + L)."""
    y, w = as_tensor(y), as_tensor(w)
    if y.ndim != 3 or w.ndim != 3 or y.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose1d: incompatible shapes {y.shape} and {w.shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    T_in, L = y.shape[-1], w.shape[-1]
    total = (T_in - 1) * stride + L
    yd, wd = y.data, w.data
    fr = np.einsum("bot,ocl->bctl", yd, wd, optimize=True)
    out = _overlap_add(fr, stride, total)

    def back(g):
        gfr = _frames(np.ascontiguousarray(g), L, stride, T_in)
        gy = np.einsum("bctl,ocl->bot", gfr, wd, optimize=True) if y.requires_grad else None
        gw = np.einsum("bot,bctl->ocl", yd, gfr, optimize=True) if w.requires_grad else None
        return gy, gw

    return Tensor._make(out, (y, w), back)
