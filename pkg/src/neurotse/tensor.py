"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a fresh, read-only array.  When gradients are
enabled and at least one input requires them, the result records its
parents and a backward closure mapping the output gradient to one
gradient per parent.  Node ids are drawn from a global counter, so
sorting by id yields a valid topological order of any recorded graph.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ParseError

_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data = _frozen(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents=(), backward=None) -> "Tensor":
        """Wrap a freshly computed array, recording the op if needed."""
        out = cls.__new__(cls)
        data = np.asarray(data)
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        # ascontiguousarray would promote 0-d results to shape (1,)
        out.data = _frozen(data if data.flags.c_contiguous else np.ascontiguousarray(data))
        out.grad = None
        out.node_id = next(_ids)
        out.name = None
        track = backward is not None and is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._make(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar (implementations live in functional) --------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(root: Tensor) -> list:
    """All recorded nodes reachable from ``root``, inputs before outputs."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf requiring it."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ContractError(
                    f"gradient shape {pg.shape} does not match input shape {parent.data.shape}")
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
        if not retain_graph:
            node._parents = ()
            node._backward = None


# -- binary serialization -------------------------------------------------

TENSOR_MAGIC = b"NXT1"


def write_tensor(fh, arr) -> None:
    """Little-endian: magic, rank (u64), extents (u64 each), f64 payload."""
    arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    start = fh.tell() if hasattr(fh, "tell") else 0
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ParseError(f"bad tensor magic {magic!r}", start)
    raw = fh.read(8)
    if len(raw) != 8:
        raise ParseError("truncated tensor header", start + 4)
    (rank,) = struct.unpack("<Q", raw)
    if rank > 32:
        raise ParseError(f"implausible tensor rank {rank}", start + 4)
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ParseError("truncated tensor extents", start + 12)
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ParseError(
            f"tensor payload truncated: expected {8 * count} bytes, got {len(payload)}",
            start + 12 + 8 * rank + len(payload))
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
