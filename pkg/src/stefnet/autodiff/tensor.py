"""Dense tensors and the reverse-mode gradient tape."""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_next_id = itertools.count()
_active_tapes: list = []
_NO_GRAD = object()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array that can take part in a gradient tape.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float64 array.
    requires_grad : bool
        Whether backward passes should produce a gradient for this tensor.
    name : str, optional
        Label used in diagnostics.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, order="C", copy=True)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id = next(_next_id)

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # Skips the defensive copy for freshly computed op outputs.
        t = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        t.data = data if data.flags.c_contiguous else data.copy(order="C")
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t.tape_id = next(_next_id)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, as_tensor(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, as_tensor(-1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One recorded operation.

    ``backward`` maps the gradients of ``outputs`` (one array per output)
    to a sequence of gradients for ``inputs``; ``None`` marks an input that
    receives nothing.  Intermediates saved by the forward pass live in the
    closure.
    """

    kind: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[..., Sequence[Optional[np.ndarray]]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.tape_id for t in self.inputs)

    @property
    def output_ids(self) -> tuple[int, ...]:
        return tuple(t.tape_id for t in self.outputs)


@dataclass(eq=False)
class GradientTape:
    """Append-only log of differentiable operations.

    Use as a context manager; every op executed inside the block whose
    inputs require gradients is recorded here.  Tapes nest: the innermost
    active tape receives the records.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "GradientTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        for i in range(len(_active_tapes) - 1, -1, -1):
            if _active_tapes[i] is self:
                del _active_tapes[i]
                break

    def leaves(self) -> list[Tensor]:
        """Tensors consumed by the tape but produced by none of its records."""
        produced = {i for r in self.records for i in r.output_ids}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.tape_id not in produced and t.tape_id not in seen:
                    seen[t.tape_id] = t
        return list(seen.values())

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Optional[GradientTape]:
    top = _active_tapes[-1] if _active_tapes else None
    return top if isinstance(top, GradientTape) else None


@contextmanager
def no_grad():
    """Suspend recording on any enclosing tape."""
    _active_tapes.append(_NO_GRAD)
    try:
        yield
    finally:
        _active_tapes.pop()


def record(kind: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward) -> None:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    tape.records.append(Record(kind, tuple(inputs), tuple(outputs), backward))


def backward(loss: Tensor, tape: GradientTape, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf of ``tape`` (and on ``params``).

    Gradients are recomputed from scratch each call, so running this twice
    over the same tape yields identical results.  Leaves that the loss does
    not depend on get an all-zero gradient.

    Raises
    ------
    ShapeError
        If ``loss`` is not a single element.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        out_grads = [grads.pop(o.tape_id, None) for o in rec.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [np.zeros_like(o.data) if g is None else g
                     for o, g in zip(rec.outputs, out_grads)]
        in_grads = rec.backward(*out_grads)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(t.tape_id)
            grads[t.tape_id] = g if prev is None else prev + g

    targets = {t.tape_id: t for t in tape.leaves() if t.requires_grad}
    if loss.requires_grad and loss.tape_id not in {i for r in tape.records for i in r.output_ids}:
        targets.setdefault(loss.tape_id, loss)
    for p in params or ():
        targets.setdefault(p.tape_id, p)
    for tid, t in targets.items():
        g = grads.get(tid)
        t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)
