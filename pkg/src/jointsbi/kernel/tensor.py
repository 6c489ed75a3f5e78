"""Reverse-mode automatic differentiation over float64 numpy arrays.

The graph is a plain tape: every operation returns a new :class:`Tensor` that
remembers its parents and one vector-Jacobian callback per parent.  Calling
:func:`backward` walks the tape once in reverse topological order and
accumulates gradients.  Everything is computed in 64-bit precision and no
operation mutates its inputs, so repeated evaluation of the same graph on the
same data is bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from ..errors import DimensionMismatchError, NonFiniteError

Array = np.ndarray


class Tensor:
    """A node in the differentiation graph holding a float64 array."""

    __slots__ = ("data", "parents", "vjps", "op")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjps: tuple[Callable[[Array], Array], ...] = (),
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, op="const")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        vjps=(lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        op="add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        vjps=(lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
        op="sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
        op="mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data / b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        op="div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, parents=(a,), vjps=(lambda g: -g,), op="neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, parents=(a,), vjps=(lambda g: 2.0 * a.data * g,), op="square")


# -- transcendental -----------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out,), op="exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), vjps=(lambda g: g / a.data,), op="log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * (1.0 - out * out),), op="tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out * (1.0 - out),), op="sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), vjps=(lambda g: g * mask,), op="relu")


def swish(a) -> Tensor:
    a = as_tensor(a)
    sig = expit(a.data)
    out = a.data * sig
    return Tensor(
        out,
        parents=(a,),
        vjps=(lambda g: g * (sig + out * (1.0 - sig)),),
        op="swish",
    )


# -- structural ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatchError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return Tensor(
        a.data @ b.data,
        parents=(a, b),
        vjps=(lambda g: g @ b.data.T, lambda g: a.data.T @ g),
        op="matmul",
    )


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), vjps=(vjp,), op="sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        vjps=(lambda g: g.reshape(a.shape),),
        op="reshape",
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionMismatchError(f"transpose expects a 2-d tensor, got {a.shape}")
    return Tensor(a.data.T, parents=(a,), vjps=(lambda g: g.T,), op="transpose")


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(k: int):
        def vjp(g: Array) -> Array:
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            return g[tuple(index)]

        return vjp

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        vjps=tuple(make_vjp(k) for k in range(len(tensors))),
        op="concat",
    )


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-d tensor."""
    a = as_tensor(a)

    def vjp(g: Array) -> Array:
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return full

    return Tensor(a.data[:, start:stop], parents=(a,), vjps=(vjp,), op="slice_cols")


def permute_cols(a, perm: Array) -> Tensor:
    """Reorder the columns of a 2-d tensor by a fixed permutation."""
    a = as_tensor(a)
    perm = np.asarray(perm, dtype=np.intp)
    inv = np.argsort(perm)
    return Tensor(a.data[:, perm], parents=(a,), vjps=(lambda g: g[:, inv],), op="permute_cols")


# -- gradient driver ----------------------------------------------------


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[Array]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors not reachable from ``output`` get a zero gradient of their own
    shape.  Raises :class:`NonFiniteError` if the output value itself is not
    finite, carrying the producing operation name.
    """
    if output.data.size != 1:
        raise DimensionMismatchError(f"backward needs a scalar output, got shape {output.shape}")
    if not np.isfinite(output.data).all():
        raise NonFiniteError(output.op)

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(output): np.ones_like(output.data)}
    for node in reversed(topo):
        grad = grads.get(id(node))
        if grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(grad)
            existing = grads.get(id(parent))
            if existing is None:
                grads[id(parent)] = contribution
            else:
                grads[id(parent)] = existing + contribution

    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Array]):
    """Evaluate ``fn`` on tensor-wrapped parameters and differentiate it.

    ``fn`` receives a dict of leaf tensors keyed like ``params`` and must
    return a scalar tensor.  Returns ``(value, grads)`` where ``grads`` has
    the same keys and shapes as ``params``; parameters the loss never touches
    get zero gradients.
    """
    leaves = {name: Tensor(value, op=f"param:{name}") for name, value in params.items()}
    out = fn(leaves)
    names = list(leaves)
    grads = backward(out, [leaves[name] for name in names])
    return float(out.data), dict(zip(names, grads))
