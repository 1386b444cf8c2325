"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward

# Denominator floor of the relative error; gradients below it are compared absolutely.
REL_FLOOR = 1e-8
# Central differences carry ~eps*|f|/h of round-off, so model-level checks floor
# the denominator at this fraction of |f|, well above that round-off for h >= 1e-5.
LOSS_RELATIVE_FLOOR = 1e-6
# Relative gap between the h and h/2 differences that marks a kink inside the step,
# and how many times the step is then cut tenfold.
KINK_GAP = 1e-3
KINK_RETRIES = 1


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_diff_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps one Tensor (or a list of Tensors when ``x`` is a list of
    arrays) to a scalar Tensor.  Every coordinate of every input is
    perturbed, so keep inputs small.
    """
    multi = isinstance(x, (list, tuple))
    arrays = [np.array(a, dtype=np.float64) for a in (x if multi else [x])]

    def call(arrs, grad=False):
        ts = [Tensor(a, requires_grad=grad) for a in arrs]
        out = f(ts if multi else ts[0])
        return ts, out

    ts, out = call(arrays, grad=True)
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    worst = 0.0
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            fp = call(plus)[1].item()
            fm = call(minus)[1].item()
            flat[j] = (fp - fm) / (2.0 * h)
        worst = max(worst, rel_error(analytic[i], numeric))
    return worst


@dataclass
class ParamCheck:
    name: str
    shape: tuple
    directional_error: float
    coord_errors: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max([self.directional_error] + self.coord_errors)


def check_parameters(loss_fn, params: dict, rng: np.random.Generator, h: float = 1e-4,
                     n_coords: int = 2) -> list:
    """Check every named parameter of a model against central differences.

    For each parameter tensor this compares the directional derivative along
    a random unit-length direction (which touches every coordinate at once) and
    the partial derivatives at the ``n_coords`` largest-gradient coordinates
    plus one random coordinate.  ``loss_fn()`` must rebuild the graph from the
    current ``.data`` of the parameters.

    Numeric derivatives are central differences at steps h and h/2 combined
    by one Richardson step, which cancels the O(h^2) truncation term and so
    allows a step large enough to keep round-off small in deep graphs.  The
    direction is unit length so a directional step moves the parameter no
    further than a single-coordinate step; a longer step crosses ReLU kinks.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    floor = max(REL_FLOOR, LOSS_RELATIVE_FLOOR * max(1.0, abs(loss.item())))
    backward(loss)
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}

    def evaluate() -> float:
        from .tensor import no_grad
        with no_grad():
            return loss_fn().item()

    def perturbed(p, delta):
        orig = p.data
        p.data = orig + delta
        p.data.flags.writeable = False
        try:
            return evaluate()
        finally:
            p.data = orig

    def derivative(p, direction):
        step = h
        for _ in range(KINK_RETRIES + 1):
            d1 = (perturbed(p, step * direction) - perturbed(p, -step * direction)) / (2.0 * step)
            d2 = (perturbed(p, 0.5 * step * direction) - perturbed(p, -0.5 * step * direction)) / step
            # smooth: d1 and d2 agree to O(step^2); a larger gap means a kink inside the step
            if abs(d1 - d2) <= KINK_GAP * max(abs(d1), abs(d2), floor):
                break
            step *= 0.1
        return (4.0 * d2 - d1) / 3.0

    results = []
    for name, p in params.items():
        g = grads[name]
        v = rng.standard_normal(p.shape)
        v /= max(np.linalg.norm(v), 1e-300)
        num = derivative(p, v)
        check = ParamCheck(name, p.shape, rel_error(float((g * v).sum()), num, floor))
        coords = list(np.argsort(-np.abs(g).reshape(-1))[:n_coords])
        coords.append(int(rng.integers(g.size)))
        for c in dict.fromkeys(coords):
            e = np.zeros(g.size)
            e[c] = 1.0
            num = derivative(p, e.reshape(p.shape))
            check.coord_errors.append(rel_error(g.reshape(-1)[c], num, floor))
        results.append(check)
    return results
