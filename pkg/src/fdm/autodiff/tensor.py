"""Dense tensors and the operation tape.

Gradients of complex tensors follow the conjugate convention: for a real loss
``L`` and a complex tensor ``z = a + ib`` the stored gradient is
``dL/da + i dL/db`` (twice ``dL/d conj(z)``).  A step ``z -= lr * z.grad`` is
then steepest descent, and real tensors simply keep the real part.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

REAL_DTYPES = (np.float32, np.float64)
COMPLEX_DTYPES = (np.complex64, np.complex128)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(FloatingPointError):
    """Non-finite value encountered in checked mode."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.checked = False
        self.tapes: list[Tape] = []


_state = _State()


class Tensor:
    """A dense real64/complex128 array that can take part in reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        elif arr.dtype.kind not in "fc":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: str | None = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_complex(self) -> bool:
        return self.data.dtype.kind == "c"

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar; implementations live in ops --------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def expand(self, shape):
        from . import ops
        return ops.expand(self, shape)

    @property
    def real(self):
        from . import ops
        return ops.real(self)

    @property
    def imag(self):
        from . import ops
        return ops.imag(self)

    def conj(self):
        from . import ops
        return ops.conj(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered list of recorded primitive applications.

    Records are appended as ops execute, so list order is a topological order
    of the computation.  ``with Tape() as tape:`` makes a tape current for the
    enclosed block; otherwise a per-thread default tape is used.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()

    def append(self, record: Record) -> None:
        self.records.append(record)


_default_tapes = threading.local()


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    tape = getattr(_default_tapes, "tape", None)
    if tape is None:
        tape = _default_tapes.tape = Tape()
    return tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def is_checked() -> bool:
    return _state.checked


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def checked(enabled: bool = True):
    """Reject NaN/Inf operands in every primitive executed inside the block."""
    prev = _state.checked
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {what}")


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and put the op on the current tape if needed.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    Primitives defined outside this package use this as their entry point.
    """
    if _state.checked:
        for i, t in enumerate(inputs):
            check_finite(t.data, f"{kind} input {i}")
    result = Tensor(out)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._op = kind
        current_tape().append(Record(kind, tuple(inputs), result, vjp))
    return result


def _fit_grad(t: Tensor, g: np.ndarray, kind: str) -> np.ndarray:
    if g.shape != t.shape:
        raise ShapeError(f"{kind}: gradient shape {g.shape} does not match input {t.shape}")
    if t.data.dtype.kind != "c" and g.dtype.kind == "c":
        g = g.real
    return g


def backward(loss: Tensor, tape: Tape | None = None, retain_tape: bool = False,
             sink: dict[int, np.ndarray] | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from a real scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, or into ``sink``
    (keyed by ``id(leaf)``) when given, which leaves the tensors untouched and
    lets several tapes run concurrently.  The tape is cleared afterwards
    unless ``retain_tape`` is set.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_complex:
        raise TypeError("backward needs a real-valued loss")
    tape = tape if tape is not None else current_tape()
    if not loss.requires_grad:
        if not retain_tape:
            tape.reset()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    if loss.is_leaf and sink is None:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = _fit_grad(inp, np.asarray(gi), rec.kind)
            if inp.is_leaf and sink is not None:
                prev = sink.get(id(inp))
                sink[id(inp)] = gi.copy() if prev is None else prev + gi
            elif inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if not retain_tape:
        tape.reset()
