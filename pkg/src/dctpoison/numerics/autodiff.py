"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Usage::

    w = Tensor(np.ones((3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ops.mse(ops.matmul(x, w), y)
    grads = backward(tape, loss)
    grads[w]  # ndarray shaped like w

A node is recorded only while a tape is active and at least one of its
inputs requires a gradient, so inference code pays nothing for the tape.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """Dense float array with an optional link into the active tape."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; the real work lives in dctpoison.numerics.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as they are created, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def watch(self, tensor: Tensor) -> None:
        if id(tensor) not in self._leaf_ids:
            self._leaf_ids.add(id(tensor))
            self.leaves.append(tensor)

    def __len__(self) -> int:
        return len(self.nodes)


def record(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, check finiteness, and append it to the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        for p in parents:
            if p.requires_grad and p.backward_fn is None:
                tape.watch(p)
        tape.nodes.append(out)
    return out


class Gradients(dict):
    """Mapping from tensor to gradient array, keyed by tensor identity."""

    def __init__(self, tensors: Iterable[Tensor], arrays: Iterable[np.ndarray]):
        super().__init__()
        # holding the tensors keeps their ids from being recycled
        self._tensors = {}
        for t, g in zip(tensors, arrays):
            self._tensors[id(t)] = t
            dict.__setitem__(self, id(t), g)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(tensor))

    def __contains__(self, tensor) -> bool:
        return dict.__contains__(self, id(tensor))

    def get(self, tensor, default=None):
        return dict.get(self, id(tensor), default)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Gradient of a scalar ``loss`` with respect to every leaf on ``tape``.

    Leaves that the loss does not depend on get a zero array.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    leaf_grads = []
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        leaf_grads.append(np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False))
    if loss.backward_fn is None and loss.requires_grad:
        # loss is itself a leaf
        return Gradients([loss], [np.ones_like(loss.data)])
    return Gradients(tape.leaves, leaf_grads)
