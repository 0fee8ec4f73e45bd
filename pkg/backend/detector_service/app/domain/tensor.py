"""
Domain Layer: Tensor and reverse-mode differentiation

A Tensor is an immutable float64 array. Operations are Function subclasses;
applying one to tensors that require gradients records a node on the
output, building the op-graph as the forward pass runs. `backward` walks
that graph once and returns the gradients of every named leaf.
"""

import threading
from contextlib import contextmanager
from typing import Any, Iterator, Optional

import numpy as np

from app.domain.exceptions import GraphStateError, InvalidArgumentError, NumericError


class Tensor:
    """Dense n-dimensional float64 array (NCHW for image data)."""

    __slots__ = ("_data", "requires_grad", "name", "_creator")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.name = name
        self._creator: Optional["Function"] = None

    @classmethod
    def _from_op(cls, array: np.ndarray, creator: Optional["Function"], requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        array = np.ascontiguousarray(array, dtype=np.float64)
        array.setflags(write=False)
        out._data = array
        out.requires_grad = requires_grad
        out.name = None
        out._creator = creator
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def is_recorded(self) -> bool:
        """True while a forward node is attached and backward has not consumed it."""
        return self._creator is not None

    def numpy(self) -> np.ndarray:
        """Writable copy of the data."""
        return np.array(self._data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording nodes (per thread)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per input tensor.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.isfinite(out).all():
            raise NumericError(f"{cls.__name__} produced non-finite values")
        requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor._from_op(out, fn if requires_grad else None, requires_grad)


class Gradients(dict):
    """Leaf name -> gradient array. Frozen or unnamed leaves have no entry."""


def _topological_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor._creator.inputs:
            if parent._creator is not None and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(output: Tensor, upstream: Optional[np.ndarray] = None) -> Gradients:
    """
    Propagate `upstream` (dL/d output) back through the recorded graph.

    The graph is released afterwards; a second call on the same output raises
    GraphStateError, as does a call on a tensor with no recorded forward.
    """
    if output._creator is None:
        raise GraphStateError("backward called without a recorded forward pass")
    if upstream is None:
        if output.data.size != 1:
            raise InvalidArgumentError(f"upstream gradient required for output of shape {output.shape}")
        upstream = np.ones(output.shape)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != output.shape:
        raise InvalidArgumentError(
            f"upstream gradient shape {upstream.shape} does not match output shape {output.shape}"
        )

    order = _topological_order(output)
    pending: dict[int, np.ndarray] = {id(output): upstream}
    result = Gradients()
    for tensor in reversed(order):
        grad = pending.pop(id(tensor), None)
        fn = tensor._creator
        if grad is None:
            continue
        for parent, parent_grad in zip(fn.inputs, fn.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._creator is not None:
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
            elif parent.name is not None:
                if parent.name in result:
                    result[parent.name] = result[parent.name] + parent_grad
                else:
                    result[parent.name] = np.array(parent_grad)

    for tensor in order:
        tensor._creator = None
    return result
