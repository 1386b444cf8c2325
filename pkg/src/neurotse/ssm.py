"""Selective state-space scan and the gated Mamba block.

The continuous system h'(t) = A h(t) + B x(t), y(t) = C h(t) is realized
with a diagonal, strictly negative A per channel.  After discretization
each channel/state pair obeys the first-order recurrence

    h_t = abar_t * h_{t-1} + bbar_t * x_t,    y_t = <C_t, h_t> + D * x_t

which is evaluated either step by step or as an associative prefix scan
over pairs (a, b) with composition (a1, b1) then (a2, b2) = (a2 a1, a2 b1 + b2).
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ContractError
from .nn import Linear, Module, Parameter
from .tensor import Tensor, as_tensor

SCAN_IMPLS = ("sequential", "parallel")


# -- raw scan kernels (numpy, time on axis 1) ---------------------------------

def scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t h_{t-1} + b_t with h_{-1} = 0, time on axis 1, strict time order."""
    h = np.empty(np.broadcast_shapes(a.shape, b.shape))
    prev = np.zeros(h.shape[:1] + h.shape[2:])
    for t in range(h.shape[1]):
        prev = a[:, t] * prev + b[:, t]
        h[:, t] = prev
    return h


def combine(first, second):
    """Compose two affine maps h -> a h + b, ``first`` applied first."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Brent-Kung inclusive scan: O(T) work, 2 log2(T) vectorized sweeps."""
    shape = np.broadcast_shapes(a.shape, b.shape)
    T = shape[1]
    n = 1 << max(T - 1, 0).bit_length()
    A = np.ones((shape[0], n) + shape[2:])
    Bv = np.zeros_like(A)
    A[:, :T] = a
    Bv[:, :T] = b
    s = 1
    while s < n:
        lo, hi = slice(s - 1, n, 2 * s), slice(2 * s - 1, n, 2 * s)
        a_hi = A[:, hi]
        Bv[:, hi] = a_hi * Bv[:, lo] + Bv[:, hi]
        A[:, hi] = a_hi * A[:, lo]
        s *= 2
    s = n // 4
    while s >= 1:
        lo, hi = slice(2 * s - 1, n - s, 2 * s), slice(3 * s - 1, n, 2 * s)
        a_hi = A[:, hi]
        Bv[:, hi] = a_hi * Bv[:, lo] + Bv[:, hi]
        A[:, hi] = a_hi * A[:, lo]
        s //= 2
    return Bv[:, :T]


def _scan(a, b, impl):
    if impl == "sequential":
        return scan_sequential(a, b)
    if impl == "parallel":
        return scan_parallel(a, b)
    raise ContractError(f"unknown scan implementation {impl!r}; expected one of {SCAN_IMPLS}")


def _reverse_scan(a, b, impl):
    """g_t = b_t + a_{t+1} g_{t+1}, the adjoint recurrence."""
    a_next = np.concatenate([a[:, 1:], np.zeros_like(a[:, :1])], axis=1)
    return np.flip(_scan(np.flip(a_next, 1), np.flip(b, 1), impl), 1)


def _scan_forward(x, abar, bbar, C, D, impl):
    h = _scan(abar, bbar * x[..., None], impl)
    y = np.einsum("btdn,btn->btd", h, C) + D * x
    return h, y


def _scan_backward(gy, x, abar, bbar, C, D, h, impl):
    gh = _reverse_scan(abar, gy[..., None] * C[:, :, None, :], impl)
    h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
    g_abar = gh * h_prev
    g_bbar = gh * x[..., None]
    g_x = np.einsum("btdn,btdn->btd", gh, bbar) + D * gy
    g_C = np.einsum("btd,btdn->btn", gy, h)
    g_D = (gy * x).reshape(-1, x.shape[-1]).sum(0)
    return gh, g_x, g_abar, g_bbar, g_C, g_D


def _flatten_batch(arr, tail):
    lead = arr.shape[:arr.ndim - tail]
    return arr.reshape((-1,) + arr.shape[arr.ndim - tail:]), lead


# -- differentiable operations ---------------------------------------------------

def discretize(delta, A, B):
    """Zero-order hold for A, Euler step for B.

    delta (..., T, d) > 0, A (d, N), B (..., T, N) ->
    abar = exp(delta * A) and bbar = delta * B, both (..., T, d, N).
    """
    delta, A, B = as_tensor(delta), as_tensor(A), as_tensor(B)
    if np.any(delta.data <= 0):
        raise ContractError("discretize requires delta > 0 everywhere")
    d3 = F.reshape(delta, delta.shape + (1,))
    abar = F.exp(F.mul(d3, A))
    bbar = F.mul(d3, F.reshape(B, B.shape[:-1] + (1, B.shape[-1])))
    return abar, bbar


def _check_lengths(x, *others):
    T = x.shape[-2]
    for o in others:
        if o.shape[x.ndim - 2] != T:
            raise ContractError(f"sequence length mismatch: x has T={T}, parameter has shape {o.shape}")


def selective_scan_discrete(x, abar, bbar, C, D, impl: str = "parallel") -> Tensor:
    """Scan with pre-discretized parameters.

    x (..., T, d); abar, bbar (..., T, d, N); C (..., T, N); D (d,).
    """
    x, abar, bbar, C, D = map(as_tensor, (x, abar, bbar, C, D))
    _check_lengths(x, abar, bbar, C)
    xd, lead = _flatten_batch(x.data, 2)
    ad = np.broadcast_to(abar.data, lead + abar.shape[-3:]).reshape((-1,) + abar.shape[-3:])
    bd = np.broadcast_to(bbar.data, lead + bbar.shape[-3:]).reshape((-1,) + bbar.shape[-3:])
    cd = np.broadcast_to(C.data, lead + C.shape[-2:]).reshape((-1,) + C.shape[-2:])
    h, y = _scan_forward(xd, ad, bd, cd, D.data, impl)

    def back(g):
        g = g.reshape(xd.shape)
        _, g_x, g_a, g_b, g_c, g_d = _scan_backward(g, xd, ad, bd, cd, D.data, h, impl)
        return (g_x.reshape(x.shape),
                F._unbroadcast(g_a.reshape(lead + g_a.shape[1:]), abar.shape),
                F._unbroadcast(g_b.reshape(lead + g_b.shape[1:]), bbar.shape),
                F._unbroadcast(g_c.reshape(lead + g_c.shape[1:]), C.shape),
                g_d)

    return Tensor._make(y.reshape(x.shape), (x, abar, bbar, C, D), back)


def selective_scan_sequential(x, abar, bbar, C, D) -> Tensor:
    return selective_scan_discrete(x, abar, bbar, C, D, impl="sequential")


def selective_scan_parallel(x, abar, bbar, C, D) -> Tensor:
    return selective_scan_discrete(x, abar, bbar, C, D, impl="parallel")


def selective_scan(x, delta, A, B, C, D, impl: str = "parallel") -> Tensor:
    """Fused discretize + scan + readout.

    x, delta (..., T, d); A (d, N); B, C (..., T, N); D (d,).  Avoids
    recording the (T, d, N) intermediates as graph nodes.
    """
    x, delta, A, B, C, D = map(as_tensor, (x, delta, A, B, C, D))
    _check_lengths(x, delta, B, C)
    if np.any(delta.data <= 0):
        raise ContractError("selective_scan requires delta > 0 everywhere")
    xd, lead = _flatten_batch(x.data, 2)
    dd = delta.data.reshape(xd.shape)
    Bd = B.data.reshape((xd.shape[0],) + B.shape[-2:])
    Cd = C.data.reshape(Bd.shape)
    Ad = A.data
    abar = np.exp(dd[..., None] * Ad)
    bbar = dd[..., None] * Bd[:, :, None, :]
    h, y = _scan_forward(xd, abar, bbar, Cd, D.data, impl)

    def back(g):
        g = g.reshape(xd.shape)
        gh, g_x, g_a, _, g_c, g_d = _scan_backward(g, xd, abar, bbar, Cd, D.data, h, impl)
        ga_pre = g_a * abar  # d/d(delta*A)
        ghB = np.einsum("btdn,btn->btd", gh, Bd)
        g_delta = np.einsum("btdn,dn->btd", ga_pre, Ad) + ghB * xd
        g_A = np.einsum("btdn,btd->dn", ga_pre, dd)
        g_B = np.einsum("btdn,btd->btn", gh, dd * xd)
        return (g_x.reshape(x.shape), g_delta.reshape(delta.shape), g_A,
                g_B.reshape(B.shape), g_c.reshape(C.shape), g_d)

    return Tensor._make(y.reshape(x.shape), (x, delta, A, B, C, D), back)


def causal_depthwise_conv(x, w, b) -> Tensor:
    """Per-channel causal convolution over time.

    x (..., T, d), w (d, K), b (d,):  y_t = b + sum_j w[:, j] * x_{t-K+1+j}.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    K = w.shape[1]
    xd = x.data
    T = xd.shape[-2]
    widths = [(0, 0)] * xd.ndim
    widths[-2] = (K - 1, 0)
    xp = np.pad(xd, widths)
    wd = w.data
    out = np.broadcast_to(b.data, xd.shape).copy()
    for j in range(K):
        out += xp[..., j:j + T, :] * wd[:, j]

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-2], g.shape[-1])
        xp2 = xp.reshape(-1, xp.shape[-2], xp.shape[-1])
        for j in range(K):
            gxp[..., j:j + T, :] += g * wd[:, j]
            gw[:, j] = np.einsum("btd,btd->d", g2, xp2[:, j:j + T])
        gb = g2.sum(axis=(0, 1))
        return gxp[..., K - 1:, :], gw, gb

    return Tensor._make(out, (x, w, b), back)


# -- Mamba block -------------------------------------------------------------

def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


class MambaBlock(Module):
    """in_proj -> (main, gate); main: causal conv, SiLU, selective scan; gate: SiLU.

    The gated product is projected back to ``d_model`` and added to the input.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16,
                 expand: int = 2, conv_width: int = 4, dt_min: float = 1e-3, dt_max: float = 1e-1,
                 scan_impl: str = "parallel"):
        d_inner = expand * d_model
        self.d_model, self.d_inner, self.d_state = d_model, d_inner, d_state
        self.scan_impl = scan_impl
        self.in_proj = Linear(d_model, 2 * d_inner, rng)
        bound = 1.0 / np.sqrt(conv_width)
        self.conv_w = Parameter(rng.uniform(-bound, bound, (d_inner, conv_width)))
        self.conv_b = Parameter(rng.uniform(-bound, bound, d_inner))
        self.proj_delta = Linear(d_inner, d_inner, rng)
        self.proj_delta.weight = Parameter(self.proj_delta.weight.data * 0.1)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_inner))
        self.proj_delta.bias = Parameter(_inv_softplus(dt))
        self.proj_B = Linear(d_inner, d_state, rng, bias=False)
        self.proj_C = Linear(d_inner, d_state, rng, bias=False)
        self.A_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))))
        self.D_skip = Parameter(np.ones(d_inner))
        self.out_proj = Linear(d_inner, d_model, rng)

    def forward(self, x):
        xz = self.in_proj(x)
        main, gate = F.split(xz, [self.d_inner, self.d_inner], axis=-1)
        u = F.silu(causal_depthwise_conv(main, self.conv_w, self.conv_b))
        delta = F.softplus(self.proj_delta(u))
        A = F.scale(F.exp(self.A_log), -1.0)
        y = selective_scan(u, delta, A, self.proj_B(u), self.proj_C(u), self.D_skip, self.scan_impl)
        y = F.mul(y, F.silu(gate))
        return F.add(self.out_proj(y), x)
