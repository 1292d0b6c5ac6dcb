"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation is a :class:`Function` whose ``backward`` is itself written
with differentiable operations, so gradients can be differentiated again
(``create_graph=True``).  Second-order meta-gradients rely on this.

Nodes receive a monotonically increasing id at creation, which makes the
creation order a valid topological order.  Backpropagation visits nodes by
decreasing id and processes each node's inputs left to right, so gradient
accumulation order is fixed and repeated passes are bit-identical.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def grad_mode(enabled: bool):
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = previous


def no_grad():
    return grad_mode(False)


class Tensor:
    """Dense float64 array that records the operation that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_ctx", "_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx = None
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._ctx = None
        t._id = next(_ids)
        return t

    # -- introspection -----------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs exactly one element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __deepcopy__(self, memo):
        # copies are fresh leaves with fresh ids; ids must stay unique
        t = Tensor(self.data.copy(), self.requires_grad, self.name)
        memo[id(self)] = t
        return t

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{label}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    # -- shape and reductions ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


class Function:
    """One differentiable operation.

    ``forward`` maps input arrays to an output array.  ``backward`` maps the
    output gradient (a Tensor) to one gradient Tensor (or None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(x) for x in inputs)
        fn = cls(*inputs)
        with np.errstate(all="ignore"):
            out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.__name__} produced non-finite values")
        result = Tensor._wrap(out)
        if _grad_enabled and any(t.requires_grad for t in inputs):
            result.requires_grad = True
            result._ctx = fn
        return result


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)


def sum_to(t: Tensor, shape: tuple) -> Tensor:
    """Sum ``t`` over broadcast axes so that it has ``shape``."""
    if t.shape == tuple(shape):
        return t
    return SumTo.apply(t, shape=tuple(shape))


def broadcast_to(t: Tensor, shape: tuple) -> Tensor:
    if t.shape == tuple(shape):
        return t
    return BroadcastTo.apply(t, shape=tuple(shape))


def reshape(t: Tensor, shape: tuple) -> Tensor:
    t = as_tensor(t)
    if t.shape == tuple(shape):
        return t
    return Reshape.apply(t, shape=tuple(shape))


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(-(g * a) / (b * b), b.shape) if b.requires_grad else None
        return ga, gb


class Pow(Function):
    def forward(self, a, exponent):
        self.exponent = exponent
        return a**exponent

    def backward(self, g):
        (a,) = self.inputs
        p = self.exponent
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.inputs[0].exp(),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Sqrt(Function):
    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g):
        return (g / (self.inputs[0].sqrt() * 2.0),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(g @ _swap_last(b), a.shape) if a.requires_grad else None
        gb = sum_to(_swap_last(a) @ g, b.shape) if b.requires_grad else None
        return ga, gb


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = sorted(ax % a.ndim for ax in axes)
            shape = list(g.shape)
            for ax in axes:
                shape.insert(ax, 1)
            g = reshape(g, tuple(shape))
        elif self.axis is None and not self.keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (sum_to(g, self.inputs[0].shape),)


class SumTo(Function):
    def forward(self, a, shape):
        lead = a.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
        )
        out = a.sum(axis=axes, keepdims=True) if axes else a
        if lead:
            out = out.reshape(out.shape[lead:])
        return np.asarray(out).reshape(shape)

    def backward(self, g):
        return (broadcast_to(g, self.inputs[0].shape),)


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, g):
        return (reshape(g, self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        return (g.transpose(tuple(np.argsort(self.axes))),)


class Take(Function):
    """Gather from the flattened input: ``out = a.ravel()[index]``."""

    def forward(self, a, index):
        self.index = index
        return np.take(a, index)

    def backward(self, g):
        return (ScatterAdd.apply(g, index=self.index, shape=self.inputs[0].shape),)


class ScatterAdd(Function):
    """Adjoint of :class:`Take`: accumulate ``a`` into a zero array of ``shape``."""

    def forward(self, a, index, shape):
        self.index = index
        size = int(np.prod(shape))
        out = np.bincount(index.ravel(), weights=a.ravel(), minlength=size)
        return out.reshape(shape)

    def backward(self, g):
        return (Take.apply(g, index=self.index),)


class Pad2d(Function):
    """Zero padding of the last two axes."""

    def forward(self, a, pad):
        self.pad = pad
        widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(a, widths)

    def backward(self, g):
        return (Crop2d.apply(g, pad=self.pad),)


class Crop2d(Function):
    def forward(self, a, pad):
        self.pad = pad
        return np.ascontiguousarray(a[..., pad : a.shape[-2] - pad, pad : a.shape[-1] - pad])

    def backward(self, g):
        return (Pad2d.apply(g, pad=self.pad),)


def take(t: Tensor, index: np.ndarray) -> Tensor:
    return Take.apply(t, index=np.asarray(index, dtype=np.intp))


def pad2d(t: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return t
    return Pad2d.apply(t, pad=pad)


def relu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return t * Tensor._wrap((t.data > 0).astype(np.float64))


def absolute(t: Tensor) -> Tensor:
    """|t| with subgradient 0 at exact zeros."""
    t = as_tensor(t)
    return t * Tensor._wrap(np.sign(t.data))


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat_flat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate flattened tensors into one vector."""
    total = sum(p.size for p in parts)
    out = None
    offset = 0
    for p in parts:
        idx = np.arange(offset, offset + p.size)
        placed = ScatterAdd.apply(reshape(p, (p.size,)), index=idx, shape=(total,))
        out = placed if out is None else out + placed
        offset += p.size
    return out


# -- backpropagation -------------------------------------------------------


def _reachable(output: Tensor) -> list[Tensor]:
    seen = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        if node._ctx is not None:
            stack.extend(node._ctx.inputs)
    return [seen[k] for k in sorted(seen, reverse=True)]


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs that do not influence ``output`` receive zeros.  With
    ``create_graph`` the returned gradients are themselves differentiable.
    """
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"gradient needs a scalar output, got shape {output.shape}")
        grad_output = Tensor._wrap(np.ones_like(output.data))
    wanted = {t._id for t in inputs}
    grads: dict[int, Tensor] = {output._id: grad_output}
    with grad_mode(create_graph):
        for node in _reachable(output):
            g = grads.get(node._id)
            if g is None or node._ctx is None:
                continue
            if node._id not in wanted:
                del grads[node._id]
            for inp, gi in zip(node._ctx.inputs, node._ctx.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp._id)
                grads[inp._id] = gi if prev is None else prev + gi
    result = []
    for t in inputs:
        g = grads.get(t._id)
        result.append(g if g is not None else Tensor._wrap(np.zeros_like(t.data)))
    return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Returns a mapping from each trainable leaf to its gradient array.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    leaves = [n for n in _reachable(loss) if n._ctx is None]
    grads = grad(loss, leaves)
    out = {}
    for leaf, g in zip(leaves, grads):
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data
        out[leaf] = g.data
    return out


class Graph:
    """The part of the computation reachable from ``loss``, in creation order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes = list(reversed(_reachable(loss)))
        self.params = [n for n in self.nodes if n._ctx is None]

    def __len__(self):
        return len(self.nodes)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self.loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
