"""Dense float64 tensors with a record-on-execute reverse-mode tape.

Every tensor receives a sequence number at creation, so sorting the
reachable sub-graph by that number recovers execution order and the
backward pass simply walks it in reverse.  Broadcasting is deliberately
limited to tensor-vs-scalar; anything else must be reshaped or expanded
explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NumericError",
    "ContractError",
    "tensor",
    "zeros",
    "no_grad",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "matmul",
    "sparse_matmul",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "clip",
    "reshape",
    "transpose",
    "concat",
    "expand",
    "tsum",
    "backward",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An operation would produce a non-finite value (e.g. division by zero)."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_SEQ = itertools.count()
_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (inference)."""
    prev = _grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_SEQ)
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tsum(self) * (1.0 / self.size)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# Graph and backward pass


class Graph:
    """Recorded operations reachable from one output, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def collect(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.collect(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim else g


def elementwise(op_kind: str, a, b) -> Tensor:
    """Apply ``add``/``sub``/``mul``/``div``/``pow`` to equal shapes or tensor-vs-scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op_kind}: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data
    if op_kind == "add":
        return _record(x + y, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")
    if op_kind == "sub":
        return _record(x - y, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")
    if op_kind == "mul":
        return _record(
            x * y, (a, b), lambda g: (_reduce_to(g * y, a), _reduce_to(g * x, b)), "mul"
        )
    if op_kind == "div":
        if np.any(y == 0):
            raise NumericError("division by zero")
        out = x / y
        return _record(
            out,
            (a, b),
            lambda g: (_reduce_to(g / y, a), _reduce_to(-g * out / y, b)),
            "div",
        )
    if op_kind == "pow":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(x, y)
        if not np.all(np.isfinite(out)):
            raise NumericError("pow produced a non-finite value")

        def pow_back(g):
            ga = gb = None
            if a.requires_grad:
                with np.errstate(divide="ignore", invalid="ignore"):
                    d = y * np.power(x, y - 1.0)
                ga = _reduce_to(g * np.where(np.isfinite(d), d, 0.0), a)
            if b.requires_grad:
                with np.errstate(divide="ignore", invalid="ignore"):
                    d = out * np.log(x)
                gb = _reduce_to(g * np.where(np.isfinite(d), d, 0.0), b)
            return ga, gb

        return _record(out, (a, b), pow_back, "pow")
    raise ValueError(f"unknown op_kind {op_kind!r}")


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def power(a, b) -> Tensor:
    return elementwise("pow", a, b)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        return (g @ y.T if a.requires_grad else None, x.T @ g if b.requires_grad else None)

    return _record(x @ y, (a, b), back, "matmul")


def sparse_matmul(a: Tensor, s) -> Tensor:
    """``a @ s`` for a constant scipy sparse matrix ``s``."""
    if a.ndim != 2 or a.shape[1] != s.shape[0]:
        raise ShapeError(f"sparse_matmul: {a.shape} @ {s.shape}")
    st = s.T.tocsr()
    out = np.asarray((st @ a.data.T).T)
    return _record(out, (a,), lambda g: (np.asarray((s @ g.T).T),), "sparse_matmul")


# ---------------------------------------------------------------------------
# Unary functions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def concat(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _record(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``x`` (size-1 axes, same rank) to ``shape``."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(x.shape, shape)):
        raise ShapeError(f"cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    return _record(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
        "expand",
    )


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    parts = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts):
        raise ContractError("only basic indexing is differentiable")
    out = x.data[key]

    def back(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _record(np.array(out), (x,), back, "index")


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    if axis is None:
        return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, g),), "sum")
    axis = axis if isinstance(axis, tuple) else (axis,)
    axis = tuple(a % x.ndim for a in axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _record(x.data.sum(axis=axis), (x,), back, "sum")


# ---------------------------------------------------------------------------
# Binary serialization: "DCTN", u32 rank, u64 dims..., f64 payload (little-endian)

_MAGIC = b"DCTN"


def write_tensor(fh: BinaryIO, data) -> None:
    arr = np.ascontiguousarray(data.data if isinstance(data, Tensor) else data, dtype="<f8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ContractError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh), requires_grad=requires_grad)
