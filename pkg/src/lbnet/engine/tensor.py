"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation executed while gradient recording is enabled
appends a :class:`Node` to the current thread's :class:`Tape`.  Calling
:func:`backward` on a scalar replays that tape in reverse, accumulates
``d loss / d leaf`` into ``leaf.grad`` and clears the tape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from lbnet.errors import DimensionError, UsageError

MAX_RANK = 4

_local = threading.local()


class Node:
    """One recorded operation: its output, its inputs and the vector-Jacobian product."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: "Tensor", inputs: Sequence["Tensor"], backward_fn: Callable):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        # Detach outputs so closures (and the arrays they hold) can be freed.
        for node in self.nodes:
            node.output._node = None
            node.inputs = ()
            node.backward_fn = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """A dense float64 array that can take part in gradient recording.

    Args:
        data: anything ``numpy.asarray`` accepts.  Values are copied into a
            contiguous float64 buffer.
        requires_grad: mark the tensor as a leaf whose gradient is wanted.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor for op outputs: no copy when already float64.
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_shape(arr.shape)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the functional module owns the semantics.
    def __add__(self, other):
        from lbnet.engine import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from lbnet.engine import functional as F
        return F.sub(self, other)

    def __mul__(self, other):
        from lbnet.engine import functional as F
        if np.isscalar(other):
            return F.scale(self, float(other))
        return F.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from lbnet.engine import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from lbnet.engine import functional as F
        return F.matmul(self, other)


def _raise_item(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _check_shape(shape: tuple) -> None:
    if len(shape) > MAX_RANK:
        raise DimensionError(f"tensors have at most {MAX_RANK} axes, got shape {shape}")
    for axis, extent in enumerate(shape):
        if extent < 1:
            raise DimensionError(f"axis {axis} has non-positive extent in shape {shape}", axis=axis)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it on the tape when any input wants gradients.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    input (``None`` where no gradient flows).
    """
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        node = Node(out, inputs, backward_fn)
        out._node = node
        current_tape().record(node)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Gradients are added to any existing ``.grad`` (accumulation is additive).
    The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    tape = tape if tape is not None else current_tape()
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        _accumulate_leaf(loss, seed)
        tape.clear()
        return
    pending = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                _accumulate_leaf(t, gi)
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    tape.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
