"""Dense float32 tensors with a reverse-mode gradient tape.

Only the primitives needed by the rankers, the attacks and the defense are
provided. An operation is recorded on the innermost active :class:`Tape`
when at least one of its inputs requires a gradient; otherwise it is plain
array arithmetic and nothing is kept.

Values are stored as 32-bit floats. Reductions and matrix products
accumulate in 64 bits before the result is rounded back, and gradients are
accumulated in 64 bits during the backward pass.
"""

import logging
import threading
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import AdvrankingError

_log = logging.getLogger(__name__)

#: Storage type of every tensor
DTYPE = np.float32

Axis = Optional[Union[int, Tuple[int, ...]]]
GradRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(AdvrankingError, ValueError):
    """Operands of an operation do not have conforming shapes."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(shape) for shape in shapes)
        listing = " and ".join(str(shape) for shape in self.shapes)
        super().__init__("{}: incompatible shapes {}".format(op, listing))


class TapeError(AdvrankingError):
    """A backward pass was requested on an unusable loss or tape."""


class Tensor:
    """N-dimensional float32 array that may take part in a gradient tape.

    Attributes:
        data: The values, always a ``float32`` numpy array.
        requires_grad: Whether gradients flow into this tensor.
        grad: Gradient of the last backward pass, same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt an already computed array without copying it."""

        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=DTYPE)
        tensor.requires_grad = False
        tensor.grad = None
        tensor._tape = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return "Tensor(shape={}{})".format(self.shape, flag)

    # Operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    """Return ``value`` itself if it is a tensor, else a constant tensor."""

    return value if isinstance(value, Tensor) else Tensor(value)


class _Node(NamedTuple):
    out: Tensor
    inputs: Tuple[Tensor, ...]
    rule: GradRule


_state = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape entered by the current thread, if any."""

    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager. Operations executed inside the block on
    tensors requiring a gradient are appended in execution order, which is
    a topological order of the graph. Tapes nest; the innermost one records.
    A tape serves exactly one backward pass.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], rule: GradRule):
        if self.consumed:
            raise TapeError("Tape was already consumed by a backward pass")
        self.nodes.append(_Node(out, inputs, rule))
        out._tape = self

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` of every tensor on this tape requiring one.

        Raises:
            TapeError: The loss is not a scalar, was not produced on this
                tape, or the tape was already consumed.
        """

        if loss.size != 1:
            raise TapeError(
                "backward() needs a scalar loss, got shape {}".format(loss.shape)
            )
        if self.consumed:
            raise TapeError("Tape was already consumed by a backward pass")
        if loss._tape is not self:
            raise TapeError("Loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, np.float64)}

        for node in reversed(self.nodes):
            upstream = grads.get(id(node.out))
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.rule(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = _unbroadcast(np.asarray(grad, dtype=np.float64), tensor.shape)
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad

        tracked: Dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in (*node.inputs, node.out):
                if tensor.requires_grad:
                    tracked[id(tensor)] = tensor

        for key, tensor in tracked.items():
            grad = grads.get(key)
            if grad is None:
                tensor.grad = np.zeros(tensor.shape, dtype=DTYPE)
            else:
                tensor.grad = grad.astype(DTYPE)

        _log.debug("Backward pass over %d nodes", len(self.nodes))
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape ``loss`` was recorded on."""

    if loss._tape is None:
        raise TapeError("Loss is not attached to a live tape")
    loss._tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""

    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(op, a.shape, b.shape) from err


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], rule: GradRule) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        out.requires_grad = True
        tape.record(out, inputs, rule)
    return out


def _wide(tensor: Tensor) -> np.ndarray:
    return tensor.data.astype(np.float64)


# Elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * _wide(b), g * _wide(a)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def rule(g):
        wa, wb = _wide(a), _wide(b)
        return g / wb, -g * wa / (wb * wb)

    return _result(a.data / b.data, (a, b), rule)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(a: TensorLike) -> Tensor:
    """``max(a, 0)`` elementwise; the derivative at exactly 0 is 0."""

    a = as_tensor(a)
    active = a.data > 0
    return _result(np.where(active, a.data, 0), (a,), lambda g: (g * active,))


def clamp(a: TensorLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip into ``[lo, hi]``; the derivative is 0 on and beyond the bounds."""

    a = as_tensor(a)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# Linear algebra


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product of two 2-D tensors, accumulated in 64 bits."""

    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    wa, wb = _wide(a), _wide(b)
    return _result((wa @ wb).astype(DTYPE), (a, b), lambda g: (g @ wb.T, wa.T @ g))


def l2_norm_rows(a: TensorLike) -> Tensor:
    """Euclidean norm over the last axis; the gradient at a zero row is 0."""

    a = as_tensor(a)
    if a.ndim < 1:
        raise ShapeError("l2_norm_rows", a.shape)

    wa = _wide(a)
    norm = np.sqrt(np.sum(wa * wa, axis=-1))

    def rule(g):
        positive = norm > 0
        scale = np.where(positive, g / np.where(positive, norm, 1.0), 0.0)
        return (scale[..., None] * wa,)

    return _result(norm.astype(DTYPE), (a,), rule)


def dot_rows(a: TensorLike, b: TensorLike) -> Tensor:
    """Inner product over the last axis, broadcasting the leading axes."""

    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-1]:
        raise ShapeError("dot_rows", a.shape, b.shape)
    _broadcast_shape("dot_rows", a, b)

    wa, wb = _wide(a), _wide(b)
    out = np.sum(wa * wb, axis=-1)
    return _result(out.astype(DTYPE), (a, b), lambda g: (g[..., None] * wb, g[..., None] * wa))


# Reductions and shape manipulation


def reduce_sum(a: TensorLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out).astype(DTYPE), (a,), rule)


def reduce_mean(a: TensorLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean", a.shape)
    out = np.mean(a.data, axis=axis, dtype=np.float64, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(np.asarray(out).astype(DTYPE), (a,), rule)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError("reshape", a.shape, tuple(shape)) from err
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError as err:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from err
    return _result(out, (a,), lambda g: (g,))


def take_rows(a: TensorLike, indices: Sequence[int]) -> Tensor:
    """Select rows along the first axis; repeated rows accumulate gradient."""

    a = as_tensor(a)
    index = np.asarray(indices, dtype=np.intp)
    if a.ndim < 1 or (index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0])):
        raise ShapeError("take_rows", a.shape, index.shape)

    def rule(g):
        grad = np.zeros(a.shape, dtype=np.float64)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], (a,), rule)
