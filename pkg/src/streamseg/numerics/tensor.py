"""Tensor container, op tape and parameter registry.

Tensors wrap an immutable numpy array. Ops executed while a :class:`Tape` is
active record a backward closure together with the inputs it needs, and
:meth:`Tape.backward` replays the records in exact reverse order.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np

from streamseg.errors import ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float array with shape metadata.

    ``data`` is never mutated in place by any op; the optimizer replaces it
    wholesale for parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class _Record:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered log of executed ops.

    Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)

    Gradients of leaf tensors with ``requires_grad`` are accumulated into
    their ``.grad`` attribute.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> None:
        out.requires_grad = True
        out._recorded = True
        self.records.append(_Record(out, inputs, backward, op))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ShapeError("backward", "seed gradient required for non-scalar output", loss.shape)
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if not loss._recorded and loss.requires_grad:
            _accumulate_leaf(loss, pending.pop(id(loss)))
            return
        for rec in reversed(self.records):
            g_out = pending.pop(id(rec.out), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise ShapeError(f"{rec.op}.backward", "gradient shape differs from input", t.shape, g.shape)
                if t._recorded:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = g if prev is None else prev + g
                else:
                    _accumulate_leaf(t, g)
        self.records.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


def record_op(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as a Tensor and log the op if a tape is active."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward, op)
    return out


class Parameters:
    """Named parameter registry, kept in insertion order.

    The order is significant: it defines the checkpoint payload layout.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def astype(self, dtype) -> None:
        for p in self._params.values():
            p.data = p.data.astype(dtype)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self._params.items())

    def load_state_dict(self, state) -> None:
        missing = [k for k in self._params if k not in state]
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for k, p in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError("load_state_dict", f"parameter {k!r}", p.shape, arr.shape)
            p.data = arr.astype(p.dtype)
