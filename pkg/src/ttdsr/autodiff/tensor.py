"""Tensor container and the gradient tape.

Operations record a backward closure on the innermost active :class:`Tape`.
Nothing is recorded outside a ``with Tape():`` block, which makes plain
forward passes (inference) free of graph bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64
        ) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE: list["Tape"] = []


class Tape:
    """Records operations in execution order and replays them in reverse.

    Usage::

        with Tape() as tape:
            loss = mse_loss(model(x), y)
        tape.backward(loss)
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor that
        requires a gradient. Intermediate gradients are released as soon as
        their record has been processed."""
        if seed is None:
            if loss.size != 1:
                raise ValueError("backward without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, inputs, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(f"gradient shape {gi.shape} != tensor shape {t.shape}")
                t.grad = gi if t.grad is None else t.grad + gi
            if out is not loss:
                out.grad = None
        self._records.clear()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    """Wrap ``data`` and, when a tape is active and any input needs a
    gradient, record ``backward`` for it."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out
