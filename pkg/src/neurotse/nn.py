"""Parameter containers and the small set of reusable layers."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-walking container: parameters, submodules and lists of submodules."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.data.flags.writeable = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x @ W + b with W stored as (in, out); uniform fan-in init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        bound = 1.0 / np.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(d_out) if zero else rng.uniform(-bound, bound, d_out))
        else:
            self.bias = None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class PReLU(Module):
    def __init__(self, d: int, init: float = 0.25):
        self.alpha = Parameter(np.full(d, init))

    def forward(self, x):
        return F.prelu(x, self.alpha)
