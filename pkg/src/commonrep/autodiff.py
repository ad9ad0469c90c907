"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Variable` wraps an ``np.ndarray`` value and remembers the
:class:`Function` that produced it.  Every variable gets a node id from a
process-wide counter, so a variable's id is always larger than the ids of its
operands.  Sorting the reachable sub-graph by descending id therefore gives a
valid reverse topological order; this sorted list is the tape that
:func:`backward` walks.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Any, ClassVar, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True

#: name -> Function subclass, filled in by ``Function.__init_subclass__``
REGISTRY: dict[str, type["Function"]] = {}


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording graph edges."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Variable:
    """Differentiable value: a float64 array plus an accumulated gradient."""

    __array_priority__ = 100

    def __init__(self, value: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=DTYPE)
        self.value: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._grad: np.ndarray | None = None
        self._fn: Function | None = None
        self._parents: tuple[Variable, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray | None) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=DTYPE)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Variable":
        return Variable(self.value, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_variable(x: Any) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


class Function:
    """One differentiable operation.

    Subclasses set ``name`` (registering them for gradient checking) and
    implement ``forward`` on raw arrays and ``backward`` returning one
    gradient array (or ``None``) per operand.
    """

    name: ClassVar[str | None] = None

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name is not None:
            REGISTRY[cls.name] = cls

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Variable, **kwargs) -> Variable:
        fn = cls(**kwargs)
        out = Variable(fn.forward(*(v.value for v in inputs)))
        if _grad_enabled and any(v.requires_grad for v in inputs):
            out.requires_grad = True
            out._fn = fn
            out._parents = tuple(inputs)
        return out


def tape_of(loss: Variable) -> list[Variable]:
    """Nodes reachable from ``loss`` that take part in differentiation, in
    reverse topological (descending node id) order."""
    seen: dict[int, Variable] = {}
    stack = [loss]
    while stack:
        v = stack.pop()
        if v.node_id in seen or not v.requires_grad:
            continue
        seen[v.node_id] = v
        stack.extend(v._parents)
    return [seen[i] for i in sorted(seen, reverse=True)]


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(value) into ``.grad`` of every reachable variable."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape_of(loss)
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
    for node in tape:
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        node._grad = g.copy() if node._grad is None else node._grad + g
        if node._fn is None:
            continue
        for parent, pg in zip(node._parents, node._fn.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{type(node._fn).__name__}.backward returned {pg.shape} for operand {parent.shape}"
                )
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
