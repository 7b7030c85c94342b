"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` (entered with a
``with`` block) whenever at least one operand requires a gradient. Outside a
tape every op is a plain numpy computation, which doubles as a no-grad mode
for evaluation.

Broadcasting is deliberately limited to "tensor op scalar"; anything else has
to go through an explicit op such as :func:`broadcast_rows`.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x * x)
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Tape",
    "current_tape",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "elementwise",
    "sigmoid",
    "tanh",
    "log",
    "clamp",
    "concat",
    "gather_rows",
    "reshape",
    "sum_all",
    "broadcast_rows",
    "stack",
]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in differentiation.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape, zero-initialised; backward passes add into it.
    """

    __slots__ = ("value", "requires_grad", "grad", "name", "_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._tape = None

    @classmethod
    def _from_op(cls, value: np.ndarray, tape: "Tape | None") -> "Tensor":
        out = cls.__new__(cls)
        out.value = value
        out.requires_grad = tape is not None
        out.grad = None
        out.name = None
        out._tape = tape
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so inputs always precede the nodes
    that consume them. :meth:`backward` may run only once per tape.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - mismatched nesting
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, value: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
        out = Tensor._from_op(value, self)
        self.nodes.append((out, inputs, fn))
        return out

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise ContractError("backward already ran on this tape; record a new tape")
        if loss.value.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for out, inputs, fn in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is None:
                    t.grad += gi
                else:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Run reverse mode on the tape that produced ``loss``."""
    if loss._tape is None:
        raise ContractError("loss is not attached to any tape")
    loss._tape.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        if t.grad is not None:
            t.grad.fill(0.0)


def _result(value: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._from_op(value, None)
    return tape.record(value, inputs, fn)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a ``[m, k]`` and a ``[k, n]`` tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def fn(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _result(av @ bv, (a, b), fn)


# --- elementwise ----------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is a scalar to be broadcast over ``a``."""
    if b.shape == a.shape:
        return False
    if b.shape == ():
        return True
    raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b, "add")

    def fn(g):
        return g, (g.sum() if scalar else g)

    return _result(a.value + b.value, (a, b), fn)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b, "sub")

    def fn(g):
        return g, (-g.sum() if scalar else -g)

    return _result(a.value - b.value, (a, b), fn)


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product (or product with a scalar)."""
    a, b = _as_tensor(a), _as_tensor(b)
    scalar = _check_binary(a, b, "hadamard")
    av, bv = a.value, b.value

    def fn(g):
        ga = g * bv if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = (g * av).sum() if scalar else g * av
        return ga, gb

    return _result(av * bv, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch ``add``, ``sub``, ``hadamard`` or ``scale`` by name."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "hadamard":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.value)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def log(x: Tensor) -> Tensor:
    xv = x.value
    if np.any(xv < 0):
        raise DomainError("log of a negative value")
    with np.errstate(divide="ignore"):
        y = np.log(xv)
    return _result(y, (x,), lambda g: (g / xv,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero where clipping is active."""
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _result(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


# --- structural -----------------------------------------------------------

def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis; leading dimensions must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != b.value.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat shape mismatch: {a.shape} and {b.shape}")
    split = a.shape[-1]

    def fn(g):
        return g[..., :split], g[..., split:]

    return _result(np.concatenate([a.value, b.value], axis=-1), (a, b), fn)


def gather_rows(m: Tensor, idx) -> Tensor:
    """Row lookup into ``m``; an integer gives one row, an int array a stack.

    The backward pass scatter-adds into the looked-up rows, so repeated ids
    accumulate.
    """
    if m.value.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got shape {m.shape}")
    n_rows = m.shape[0]
    arr = np.asarray(idx)
    if arr.dtype.kind not in "iu":
        raise TypeError(f"row index must be integer, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_rows):
        bad = arr.min() if arr.min() < 0 else arr.max()
        raise IndexError(f"row index {int(bad)} out of range for {n_rows} rows")
    shape = m.shape

    def fn(g):
        gm = np.zeros(shape)
        if arr.ndim == 0:
            gm[int(arr)] += g
        else:
            np.add.at(gm, arr, g)
        return (gm,)

    return _result(m.value[arr], (m,), fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector ``[d]`` into an ``[n, d]`` matrix."""
    if v.value.ndim != 1:
        raise DimensionError(f"broadcast_rows needs a vector, got shape {v.shape}")
    out = np.broadcast_to(v.value, (n, v.shape[0])).copy()
    return _result(out, (v,), lambda g: (g.sum(axis=0),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.value for t in tensors], axis=axis), tensors, fn)
