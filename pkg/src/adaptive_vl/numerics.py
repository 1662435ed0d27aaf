"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op builds a node holding its parents and a backward closure; the
graph is rebuilt on each forward pass, so layer topology may change from
step to step.  Broadcasting is limited to scalars and trailing-suffix
shapes (e.g. a bias row added to a batch of matrices).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


_local = threading.local()


def _recorders() -> list:
    if not hasattr(_local, "recorders"):
        _local.recorders = []
    return _local.recorders


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class OpRecorder:
    """Counts executed matmul FLOPs (2*m*k*n per product) on this thread."""

    def __init__(self):
        self.matmul_flops = 0
        self.matmul_calls = 0

    def record_matmul(self, flops: int) -> None:
        self.matmul_flops += int(flops)
        self.matmul_calls += 1

    def __enter__(self):
        _recorders().append(self)
        return self

    def __exit__(self, *exc):
        _recorders().remove(self)
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------
    @classmethod
    def make(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Create an op output; ``backward(g)`` pushes ``g`` into parents."""
        out = cls(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward ---------------------------------------------------------
    def topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        tape = self.topo_order()
        # intermediate grads are scratch space; leaves keep accumulating
        for node in tape:
            if node._backward is not None:
                node.grad = None
        self.grad = np.array(grad, dtype=np.float64) * np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    tail = big.shape[big.ndim - small.ndim:]
    if all(s == t or s == 1 for s, t in zip(small.shape, tail)):
        return
    raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return Tensor.make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.make(-a.data, (a,), lambda g: a.accumulate(-g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return Tensor.make(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor.make(out, (a,), lambda g: a.accumulate(-g * out * out), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.make(out, (a,), lambda g: a.accumulate(g * out), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.make(out, (a,), lambda g: a.accumulate(g * (1.0 - out * out)), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor.make(out, (a,), lambda g: a.accumulate(g * out * (1.0 - out)), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a.accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return Tensor.make(out, (a,), backward, "gelu")


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return Tensor.make(out, (a,), lambda g: a.accumulate(g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.make(a.data.transpose(axes), (a,),
                       lambda g: a.accumulate(g.transpose(inv)), "transpose")


def swap_last(a: Tensor) -> Tensor:
    return Tensor.make(np.swapaxes(a.data, -1, -2), (a,),
                       lambda g: a.accumulate(np.swapaxes(g, -1, -2)), "swap_last")


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return Tensor.make(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t.accumulate(piece)

    return Tensor.make(out, tuple(tensors), backward, "concat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table.accumulate(full)

    return Tensor.make(out, (table,), backward, "embedding")


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i, j] = a[..., i, idx[i, j]] for a 2-D integer index table."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(idx.shape[0])[:, None]
    out = a.data[..., rows, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        lead = full.reshape(-1, *full.shape[-2:])
        gl = g.reshape(-1, *g.shape[-2:])
        for i in range(idx.shape[0]):
            # rows of idx may repeat columns; add.at accumulates duplicates
            np.add.at(lead[:, i, :], (slice(None), idx[i]), gl[:, i, :])
        a.accumulate(full)

    return Tensor.make(out, (a,), backward, "gather_last")


# -- reductions ---------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return Tensor.make(out, (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def row_sum(a: Tensor) -> Tensor:
    return reduce_sum(a, axis=-1)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b``'s leading axes must equal a trailing run of ``a``'s leading axes
    (2-D ``b`` is shared weights broadcast over every batch axis).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > a.ndim or (b.ndim > 2 and b.shape[:-2] != a.shape[a.ndim - b.ndim:-2]):
        raise DimensionError(f"matmul: batch axes differ between {a.shape} and {b.shape}")
    out = a.data @ b.data
    recs = _recorders()
    if recs:
        flops = 2 * int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1]
        for r in recs:
            r.record_matmul(flops)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                if gb.ndim > b.ndim:
                    gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
                b.accumulate(gb)

    return Tensor.make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- fused normalizing ops ------------------------------------------------------

def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{op}: non-finite input")


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = as_tensor(z)
    _check_finite(z.data, "softmax_rows")
    p = softmax_array(z.data)

    def backward(g):
        z.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return Tensor.make(p, (z,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta.accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            x.accumulate(inv / n * (n * gx - gx.sum(-1, keepdims=True)
                                    - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return Tensor.make(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
        targets = targets.reshape(1)
    _check_finite(z, "cross_entropy")
    if np.any(targets < 0) or np.any(targets >= z.shape[-1]):
        raise ValueError("cross_entropy: target out of range")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(logsum - shifted[rows, targets]))

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, targets] -= 1.0
        logits.accumulate((g * p / z.shape[0]).reshape(logits.shape))

    return Tensor.make(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- gradient checking ----------------------------------------------------------

def finite_difference(fn: Callable[[], float], array: np.ndarray,
                      indices: Iterable | None = None, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad
