"""A small numpy-backed tensor with reverse-mode differentiation.

Graphs are built define-by-run: every op on a tensor that requires grad
records its parents and a closure mapping the output gradient to parent
gradients.  :func:`backward` walks the recorded graph once in reverse
topological order.

Training runs in float32.  Gradient checks switch to float64 with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense array plus an optional gradient slot.

    ``data`` is always a numpy array of the default floating dtype (unless a
    dtype is passed explicitly).  Leaves created with ``requires_grad=True``
    accumulate into ``grad`` during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or _default_dtype)


def custom_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn,
              name: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(g)`` must return one gradient (or None) per parent.  The
    graph edge is only recorded when some parent requires grad.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out.op = name
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return custom_op(data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = b
        return custom_op(a.data * a.data.dtype.type(s), (a,),
                         lambda g: (g * a.data.dtype.type(s),), "scale")
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return custom_op(data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)),
                     "mul")


def square(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def _back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return custom_op(out, (x,), _back, "gelu")


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def _back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return custom_op(data, (a, b), _back, "matmul")


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- shape ops -------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    src = a.shape
    return custom_op(data, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),), "transpose")


def index(a, i: int) -> Tensor:
    """Select entry ``i`` along the leading axis."""
    a = as_tensor(a)

    def _back(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return custom_op(a.data[i], (a,), _back, "index")


def take(a, idx, axis: int = 0) -> Tensor:
    """``np.take`` with a scatter-add backward (repeated indices allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ContractError(f"take index out of range for axis {axis} of extent {n}")
    data = np.take(a.data, idx, axis=axis)

    def _back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return custom_op(data, (a,), _back, "take")


def gather_rows(a, idx) -> Tensor:
    """Per-batch row gather: ``a`` is [B, N, L], ``idx`` is [B, K]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"gather_rows expects [B,N,L] and [B,K], got {a.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ContractError(f"row index out of range for {a.shape[1]} rows")
    bidx = np.arange(a.shape[0])[:, None]
    data = a.data[bidx, idx]

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (bidx, idx), g)
        return (full,)

    return custom_op(data, (a,), _back, "gather_rows")


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    shape = a.shape

    def _back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(data, (a,), _back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


# -- normalisation ---------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (x,), _back, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _back(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return custom_op(out.astype(x.dtype, copy=False), (x, gamma, beta), _back, "layer_norm")


def mse(a, b) -> Tensor:
    return mean(square(add(a, neg(b))))


# -- backward ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``grad`` arrays; call ``zero_grad``
    on the parameters beforehand for a fresh step.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
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


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- initialisation ------------------------------------------------------------

def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02, bound: float = 2.0,
                 dtype=None) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` stds."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype or _default_dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)
