"""
Dense numpy-backed tensor with reverse-mode automatic differentiation.

Every differentiable op builds its output through `Tensor.from_op`, which
records the parent tensors and a backward closure mapping the output gradient
to one gradient per parent. `backward` walks that recorded graph once in
reverse topological order and then releases it, so each forward pass is its
own tape and a second `backward` on the same loss raises `StaleGraphError`.
"""
import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from dqss.core.config import get_settings
from dqss.core.errors import DimensionError, NonFiniteInputError, StaleGraphError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()

# op name -> number of executions; read through op_counter()
op_counts: Counter = Counter()
_op_lock = threading.Lock()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Build tensors in `dtype` (float64 is used by the gradient checks)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def count_op(name: str) -> None:
    with _op_lock:
        op_counts[name] += 1


@contextmanager
def op_counter() -> Iterator[Counter]:
    """Yield a Counter of ops executed inside the block."""
    with _op_lock:
        before = op_counts.copy()
    delta: Counter = Counter()
    try:
        yield delta
    finally:
        with _op_lock:
            after = op_counts.copy()
        after.subtract(before)
        delta.update({k: v for k, v in after.items() if v})


class Tensor:
    """float tensor with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=get_default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._released = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn,
                name: Optional[str] = None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        out.grad = None
        out.name = name
        out._released = False
        if get_settings().debug_finite and not np.all(np.isfinite(out.data)):
            index = tuple(int(i) for i in np.argwhere(~np.isfinite(out.data))[0])
            raise NonFiniteInputError(f"{name or 'op'} produced a non-finite value at index {index}")
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar, defined in ops
    def __add__(self, other):
        from dqss.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from dqss.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from dqss.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from dqss.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from dqss.tensor import ops
        return ops.mul(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad leaf t."""
    if loss._released:
        raise StaleGraphError("backward called twice on the same graph; run forward again")
    if not loss.requires_grad:
        return
    if grad is None:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)

    order = _topological(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    # release the tape
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._released = True
