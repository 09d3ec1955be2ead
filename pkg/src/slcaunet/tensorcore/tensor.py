"""Dense tensor with reverse-mode gradients.

Tensors are channel-first numpy arrays without a batch axis.  Every
differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph in reverse topological order and deposits
leaf gradients into a :class:`GradTape`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(ValueError):
    """NaN or Inf where finite values are required."""


_grad_enabled = True
_checked = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Toggle finiteness validation of user-constructed tensors."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional real array that can take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values.  Integer input is promoted to float64; float32/float64 are kept.
    requires_grad : bool
        Mark as a leaf whose gradient should be collected.
    name : str, optional
        Label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if _checked and not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{grad})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    out = Tensor.__new__(Tensor)
    out.data = arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64)
    out.requires_grad = False
    out.name = None
    out._parents = ()
    out._backward = None
    return out


class GradTape:
    """Per-parameter gradient accumulators keyed by parameter identity.

    Gradients accumulate across :func:`backward` calls until :meth:`zero`.
    ``nodes`` holds the operation graph (topological order) of the most
    recent backward pass.
    """

    def __init__(self, params: Iterable[Tensor] = ()):
        self._params: dict[int, Tensor] = {}
        self.grads: dict[int, np.ndarray] = {}
        self.nodes: list[Tensor] = []
        self.watch(*params)

    def watch(self, *params: Tensor) -> None:
        for p in params:
            self._params[id(p)] = p

    @property
    def params(self) -> list[Tensor]:
        return list(self._params.values())

    def zero(self) -> None:
        self.grads = {k: np.zeros_like(p.data) for k, p in self._params.items()}

    def accumulate(self, param: Tensor, grad: np.ndarray) -> None:
        key = id(param)
        if key not in self._params:
            self._params[key] = param
        if grad.shape != param.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
        if key in self.grads:
            self.grads[key] += grad
        else:
            self.grads[key] = np.array(grad, dtype=param.dtype, copy=True)

    def grad(self, param: Tensor) -> np.ndarray:
        g = self.grads.get(id(param))
        return np.zeros_like(param.data) if g is None else g


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> GradTape:
    """Accumulate d(loss)/d(leaf) for every leaf that requires grad.

    ``loss`` must be a 0-d tensor.  Returns the tape (a fresh one if none is
    given).  Calling twice without ``tape.zero()`` accumulates.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if tape is None:
        tape = GradTape()
    if not loss.requires_grad:
        return tape
    order = _topo_order(loss)
    tape.nodes = order
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            tape.accumulate(node, g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape
