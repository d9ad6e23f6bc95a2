"""Tensors and the gradient tape.

Operations record themselves on the active :class:`Tape` only when a tape
is open and at least one input requires a gradient, so inference outside a
tape costs nothing extra::

    with Tape() as tape:
        loss = mean(smooth_l1(net(x), y))
    tape.backward(loss)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("pleomorph_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_recorded", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retain_grad = False
        self._recorded = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._recorded

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}{flag})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import mul
        return mul(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None, name=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed operations.

    Nodes are stored in execution order, which is a valid topological order;
    :meth:`backward` walks them in exact reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward, op=""):
        out._recorded = True
        self.nodes.append(_Node(out, tuple(parents), backward, op))

    def backward(self, root: Tensor, grad=None, keep=False):
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient (and into intermediates flagged ``retain_grad``).
        """
        if grad is None:
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.dtype)}
        leaves = {}
        if root.is_leaf and root.requires_grad:
            leaves[id(root)] = root
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.retain_grad:
                node.out.grad = g if node.out.grad is None else node.out.grad + g
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.is_leaf:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if not keep:
            self.nodes.clear()


def active_tape() -> Tape | None:
    return _active_tape.get()


def record(out: Tensor, parents, backward, op=""):
    """Attach ``out`` to the active tape if any parent needs a gradient."""
    tape = _active_tape.get()
    if tape is None:
        return out
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward, op)
    return out
