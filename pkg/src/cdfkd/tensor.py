"""Dense float tensors recorded on a reverse-mode gradient tape.

The tape is define-by-run and rebuilt for every training step: a ``Tape`` is
entered as a context manager, leaf tensors are created with ``Tape.watch``,
and every operation that touches a tracked tensor appends a backward rule.
Tensors created outside a tape (or from non-trainable parameters) flow
through operations as constants without recording anything.

Training runs in float32. Kernels preserve their input dtype, so gradient
checks may run the same code in float64 by watching float64 leaves.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "Parameter",
    "active_tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "sum_all",
    "mean_all",
    "reshape",
    "flatten",
    "concat",
    "select",
    "mean_scalars",
    "sgd_step",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def active_tape() -> "Tape | None":
    """The tape currently recording on this thread, or None."""
    return getattr(_local, "tape", None)


def _ensure_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    return data


class Tensor:
    """N-dimensional float array, optionally tracked by a tape.

    ``node`` is the handle into the owning tape; it is None for constants.
    """

    __slots__ = ("data", "node", "_tape")

    def __init__(self, data, dtype=None):
        if dtype is None:
            held = np.asarray(data)
            dtype = held.dtype if np.issubdtype(held.dtype, np.floating) else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = _ensure_finite(arr, "constant")
        self.node: int | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data)

    def tracked(self) -> bool:
        """True when this tensor is recorded on the currently active tape."""
        return self.node is not None and self._tape is active_tape()

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_Backward = Callable[[np.ndarray], Sequence[np.ndarray]]


class Tape:
    """Ordered record of operations plus the leaf nodes being watched.

    Confined to one thread; nesting is rejected because every training step
    builds a fresh tape.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], _Backward]] = []
        self._next_node = 0
        self._leaves: dict[int, tuple[int, ...]] = {}

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.tape = None

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def watch(self, data: np.ndarray) -> Tensor:
        """Register ``data`` as a differentiable leaf and return its tensor."""
        t = Tensor(data, dtype=data.dtype if hasattr(data, "dtype") else np.float32)
        t.node = self._new_node()
        t._tape = self
        self._leaves[t.node] = t.data.shape
        return t

    def record(self, out_data: np.ndarray, inputs: Sequence[Tensor], backward: _Backward, op: str) -> Tensor:
        """Wrap ``out_data`` in a tracked tensor whose backward rule is ``backward``.

        ``backward`` receives the output gradient and must return one gradient
        array per *tracked* input, in order.
        """
        out = Tensor(_ensure_finite(out_data, op), dtype=out_data.dtype)
        out.node = self._new_node()
        out._tape = self
        in_nodes = tuple(t.node for t in inputs if t.tracked())
        self._records.append((out.node, in_nodes, backward))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to every node.

        Every watched leaf appears in the result; leaves the loss never
        touched get zeros. The gradient of the loss node itself is 1.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if loss.node is None or loss._tape is not self:
            raise ValueError("loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.data.dtype)}
        # Closures may return views or one array for several inputs, so only
        # accumulate in place into buffers this loop allocated itself.
        owned = {loss.node}
        for out_node, in_nodes, backward in reversed(self._records):
            g = grads.get(out_node)
            if g is None:
                continue
            for node, gin in zip(in_nodes, backward(g)):
                acc = grads.get(node)
                if acc is None:
                    grads[node] = gin
                elif node in owned:
                    acc += gin
                else:
                    grads[node] = acc + gin
                    owned.add(node)
        for node, shape in self._leaves.items():
            if node not in grads:
                grads[node] = np.zeros(shape, dtype=loss.data.dtype)
        return grads


def _as_operand(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.asarray(x, dtype=np.float64 if isinstance(x, (float, int)) else None))
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Broadcasting is scalar-vs-tensor only; anything else must match exactly.
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo scalar broadcasting on the way back.
    if shape == () and grad.shape != ():
        return grad.sum()
    return grad


def _result_dtype(a: Tensor, b: Tensor):
    # Python scalars adopt the tensor dtype instead of promoting to float64.
    if a.shape == () and a.node is None:
        return b.dtype
    if b.shape == () and b.node is None:
        return a.dtype
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes {a.dtype} and {b.dtype}")
    return a.dtype


def _emit(out_data, inputs: Sequence[Tensor], backward: _Backward, op: str) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.tracked() for t in inputs):
        return tape.record(out_data, inputs, backward, op)
    return Tensor(_ensure_finite(out_data, op), dtype=out_data.dtype)


def add(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    _binary_shapes(a, b, "add")
    dtype = _result_dtype(a, b)
    out = (a.data + b.data).astype(dtype, copy=False)

    def backward(g):
        return [_reduce_to(g, t.shape) for t in (a, b) if t.tracked()]

    return _emit(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    _binary_shapes(a, b, "sub")
    dtype = _result_dtype(a, b)
    out = (a.data - b.data).astype(dtype, copy=False)

    def backward(g):
        grads = []
        if a.tracked():
            grads.append(_reduce_to(g, a.shape))
        if b.tracked():
            grads.append(_reduce_to(-g, b.shape))
        return grads

    return _emit(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    _binary_shapes(a, b, "mul")
    dtype = _result_dtype(a, b)
    out = (a.data * b.data).astype(dtype, copy=False)
    a_data, b_data = a.data, b.data

    def backward(g):
        grads = []
        if a.tracked():
            grads.append(_reduce_to((g * b_data).astype(dtype, copy=False), a.shape))
        if b.tracked():
            grads.append(_reduce_to((g * a_data).astype(dtype, copy=False), b.shape))
        return grads

    return _emit(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes {a.dtype} and {b.dtype}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        grads = []
        if a.tracked():
            grads.append(g @ b_data.T)
        if b.tracked():
            grads.append(a_data.T @ g)
        return grads

    return _emit(out, (a, b), backward, "matmul")


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.dtype)
    shape = a.shape

    def backward(g):
        return [np.full(shape, g, dtype=g.dtype)]

    return _emit(np.asarray(out), (a,), backward, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(dtype=a.dtype))
    shape = a.shape

    def backward(g):
        return [np.full(shape, g / n, dtype=g.dtype)]

    return _emit(out, (a,), backward, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return [g.reshape(in_shape)]

    return _emit(out, (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ranks = {t.data.ndim for t in tensors}
    if len(ranks) != 1:
        raise ShapeError(f"concat: mixed ranks {sorted(ranks)}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    tracked = [t.tracked() for t in tensors]

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return [p for p, keep in zip(pieces, tracked) if keep]

    return _emit(out, tensors, backward, "concat")


def select(a: Tensor, index: int) -> Tensor:
    """Take one slice along axis 0, keeping the remaining axes."""
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"select: index {index} out of range for shape {a.shape}")
    out = a.data[index].copy()
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return [full]

    return _emit(out, (a,), backward, "select")


def mean_scalars(values: Sequence[Tensor]) -> Tensor:
    """Order-independent mean of scalar tensors.

    The forward value is an exactly rounded sum (math.fsum), so permuting the
    inputs cannot change the result even in the last ulp.
    """
    if not values:
        raise ShapeError("mean of an empty scalar sequence")
    for v in values:
        if v.shape != ():
            raise ShapeError(f"mean_scalars requires scalars, got shape {v.shape}")
    dtype = values[0].dtype
    n = len(values)
    out = np.asarray(math.fsum(float(v.data) for v in values) / n, dtype=dtype)
    n_tracked = sum(v.tracked() for v in values)

    def backward(g):
        share = (g / n).astype(dtype, copy=False)
        return [share] * n_tracked

    return _emit(out, tuple(values), backward, "mean_scalars")


class Parameter:
    """Named weight array with SGD momentum state.

    A frozen parameter (``trainable=False``) enters every forward pass as a
    constant, so no gradient is ever recorded for it and ``sgd_step`` leaves
    it bit-identical.
    """

    __slots__ = ("name", "value", "momentum", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float32)
        self.momentum = np.zeros_like(self.value)
        self.trainable = trainable

    def tensor(self) -> Tensor:
        """Enter the parameter onto the active tape, or as a constant if frozen."""
        tape = active_tape()
        if tape is None or not self.trainable:
            return Tensor(self.value)
        return tape.watch(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def sgd_step(
    params: Sequence[Parameter],
    grads: dict[str, np.ndarray],
    lr: float = 0.01,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """SGD with momentum and weight decay, applied in place.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
    Non-trainable parameters are untouched.
    """
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            raise ValueError(f"missing gradient for trainable parameter '{p.name}'")
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for '{p.name}'")
        v = p.momentum
        v *= np.float32(momentum)
        v += g.astype(np.float32, copy=False)
        if weight_decay:
            v += np.float32(weight_decay) * p.value
        p.value -= np.float32(lr) * v
