"""Dense float64 tensors and the gradient tape.

Tensors hold contiguous row-major float64 data. Ops (see functional.py)
record backward closures on the active tape; ``Tape.backward`` replays them
in reverse execution order, which is a reverse topological order by
construction. Gradients accumulate additively across fan-out.

Backward closures must never mutate gradient arrays in place: accumulation
is always ``t.grad = t.grad + g`` so that closures may hand out views.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, loss not on tape."""


_TAPE_STACK: list["Tape"] = []


def active_tape():
    """The innermost open tape, or None when not recording."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-dimensional float64 array, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C", not ascontiguousarray: the latter promotes
        # 0-d scalars to 1-d and would break the scalar-loss contract
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only while on a tape."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; functional does the validation and tape recording.

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, shape):
        from . import functional as F
        return F.reshape(self, shape)

    def transpose(self, axes):
        from . import functional as F
        return F.transpose(self, axes)


class Tape:
    """Ordered record of executed ops; supports exactly one backward pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, backward_fn):
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor):
        """Chain rule in reverse execution order from a scalar loss."""
        if self._consumed:
            raise TapeError("tape already differentiated; build a new tape")
        if not isinstance(loss, Tensor) or loss.data.ndim != 0:
            got = getattr(loss, "shape", type(loss))
            raise TapeError(f"loss must be a scalar tensor, got {got}")
        if not any(out is loss for out, _ in self._records):
            raise TapeError("loss is not an output recorded on this tape")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def backward(tape: Tape, loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss."""
    tape.backward(loss)
