"""Tensor, Parameter and the recording tape for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import NumericalError, StateError

_state = threading.local()


def _local():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
        _state.debug = False
        _state.tape = Tape()
    return _state


def get_default_dtype() -> np.dtype:
    return _local().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _local().dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the build-wide float type (e.g. float64 for grad checks)."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _local()
    previous = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _local().grad_enabled


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    _local().debug = bool(flag)


def current_tape() -> "Tape":
    return _local().tape


class Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor", backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered op records. Recording order is a topological order by construction."""

    def __init__(self):
        self.records: list[Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def push(self, record: Record) -> None:
        if self.consumed:
            raise StateError("cannot record onto a tape that has already been differentiated")
        self.records.append(record)

    def reset(self) -> None:
        self.records = []
        self.consumed = False


def reset_tape() -> Tape:
    """Discard the current thread's tape and start a fresh one."""
    st = _local()
    st.tape = Tape()
    return st.tape


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named model weight. Frozen parameters never require gradients."""

    def __init__(self, name: str, data, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = bool(frozen)

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op output and register it on the tape when any input needs grads.

    ``backward_fn(g)`` returns one gradient (or None) per input and should skip
    the work for inputs that do not require gradients.
    """
    st = _local()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    if st.debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = st.tape
        st.tape.push(Record(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate (``+=``) so callers must zero them between steps.
    The tape is consumed; differentiating it again raises StateError.
    """
    if loss.data.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise StateError("loss is not on a tape (no input requires grad)")
    if tape.consumed:
        raise StateError("backward already ran on this tape; reset before differentiating again")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

    tape.records = []
    tape.consumed = True
    st = _local()
    if st.tape is tape:
        st.tape = Tape()
