"""Kolmogorov-Arnold layers: a learnable B-spline on every edge, sums at the nodes."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ParameterError
from .nn import Module, Parameter
from .tensor import Tensor, as_tensor


def make_grid(G: int, k: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Uniform knots on [lo, hi] with G intervals, extended by k knots per side."""
    if G < 1 or k < 0 or not hi > lo:
        raise ParameterError(f"invalid grid G={G}, k={k}, range=({lo}, {hi})")
    h = (hi - lo) / G
    return lo + h * np.arange(-k, G + k + 1, dtype=np.float64)


def _span(x: np.ndarray, grid: np.ndarray, k: int) -> np.ndarray:
    G = len(grid) - 2 * k - 1
    i = np.searchsorted(grid, x, side="right") - 1
    return np.clip(i, k, k + G - 1)


def _basis_funs(x, span, grid, k):
    """Nonzero basis values N[r] = B_{span-k+r, k}(x), r = 0..k (de Boor's triangle).

    Also returns the degree k-1 values on the same span for the derivative.
    Because the span is fixed, points outside the grid evaluate the boundary
    polynomial pieces.
    """
    N = [np.ones_like(x)]
    lower = None
    left = [None] * (k + 1)
    right = [None] * (k + 1)
    for j in range(1, k + 1):
        if j == k:
            lower = list(N)
        left[j] = x - grid[span + 1 - j]
        right[j] = grid[span + j] - x
        saved = np.zeros_like(x)
        nxt = []
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            nxt.append(saved + right[r + 1] * temp)
            saved = left[j - r] * temp
        nxt.append(saved)
        N = nxt
    return N, lower


def bspline_basis_values(x, grid: np.ndarray, k: int, with_derivative: bool = False):
    """Basis matrix (..., G+k) of degree-k B-splines on ``grid`` (plain numpy)."""
    x = np.asarray(x, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    n_basis = len(grid) - k - 1
    span = _span(x, grid, k)
    N, lower = _basis_funs(x, span, grid, k)
    out = np.zeros(x.shape + (n_basis,))
    first = (span - k)[..., None]
    for r in range(k + 1):
        np.put_along_axis(out, first + r, N[r][..., None], axis=-1)
    if not with_derivative:
        return out
    dout = np.zeros_like(out)
    if k > 0:
        # B'_{m,k} = k/(t[m+k]-t[m]) B_{m,k-1} - k/(t[m+k+1]-t[m+1]) B_{m+1,k-1}
        for r in range(k + 1):
            m = span - k + r
            d = np.zeros_like(x)
            if r >= 1:
                d += k / (grid[m + k] - grid[m]) * lower[r - 1]
            if r <= k - 1:
                d -= k / (grid[m + k + 1] - grid[m + 1]) * lower[r]
            np.put_along_axis(dout, first + r, d[..., None], axis=-1)
    return out, dout


def bspline_basis(x, grid: np.ndarray, k: int) -> Tensor:
    """Differentiable basis expansion: (...,) -> (..., G+k)."""
    x = as_tensor(x)
    vals, dvals = bspline_basis_values(x.data, grid, k, with_derivative=True)
    return Tensor._make(vals, (x,), lambda g: ((g * dvals).sum(-1),))


class KANLayer(Module):
    """out_j = sum_i base_weight[j,i] silu(x_i) + scale[j,i] * sum_m coef[j,i,m] B_m(x_i)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, G: int = 5, k: int = 3,
                 grid_range=(-1.0, 1.0)):
        if G < 2 or k < 1:
            raise ParameterError(f"KAN layer needs G >= 2 and k >= 1, got G={G}, k={k}")
        self.d_in, self.d_out, self.G, self.k = d_in, d_out, G, k
        self.grid = make_grid(G, k, *grid_range)
        self.spline_coef = Parameter(rng.normal(0.0, 0.1 / np.sqrt(d_in), (d_out, d_in, G + k)))
        bound = np.sqrt(3.0 / d_in)
        self.base_weight = Parameter(rng.uniform(-bound, bound, (d_out, d_in)))
        self.scale_spline = Parameter(np.ones((d_out, d_in)))

    def spline_weight(self):
        w = F.mul(self.spline_coef, F.reshape(self.scale_spline, (self.d_out, self.d_in, 1)))
        return F.transpose(F.reshape(w, (self.d_out, self.d_in * (self.G + self.k))), (1, 0))

    def forward(self, x):
        x = as_tensor(x)
        base = F.matmul(F.silu(x), F.transpose(self.base_weight, (1, 0)))
        basis = bspline_basis(x, self.grid, self.k)
        flat = F.reshape(basis, x.shape[:-1] + (self.d_in * (self.G + self.k),))
        return F.add(base, F.matmul(flat, self.spline_weight()))


def kan_init(d_in: int, d_out: int, G: int, k: int, rng: np.random.Generator, grid_range=(-1.0, 1.0)):
    return KANLayer(d_in, d_out, rng, G=G, k=k, grid_range=grid_range)


def kan_layer_forward(x, layer: KANLayer) -> Tensor:
    return layer(x)


class KANStack(Module):
    def __init__(self, widths, rng, G=5, k=3, grid_range=(-1.0, 1.0)):
        self.layers = [KANLayer(a, b, rng, G=G, k=k, grid_range=grid_range)
                       for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
