"""Reverse-mode autodiff tensor.

A ``Tensor`` wraps a C-contiguous float64 ndarray plus an optional gradient
of the same shape.  Operations that participate in differentiation attach a
``TapeNode`` recording the operation kind, its input tensors and a backward
rule; ``backward`` on a scalar loss replays the recorded nodes in reverse
creation order (which is a topological order, since every node is created
after its inputs) and accumulates ``grad`` on every reachable tensor that
requires it.

Gradients accumulate across ``backward`` calls until explicitly zeroed;
each pass computes its contribution in a scratch table first, so two passes
over the same graph yield exactly twice the single-pass gradient.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_seq_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded operation: kind, input tensors, and the backward rule.

    ``backward_fn`` maps the output gradient to one gradient array (or None)
    per input, in input order.  Forward values needed by the rule are bound
    into the closure at record time.
    """

    __slots__ = ("op_kind", "inputs", "backward_fn")

    def __init__(self, op_kind: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[TapeNode] = None
        self.seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (same-shape tensor arithmetic, or a python scalar) --

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))


def make_op(op_kind: str, inputs: Sequence[Tensor], data: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a forward result, attaching a tape node when recording is on."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op_kind, inputs, backward_fn)
    return out


def backward(loss: Tensor):
    """Fill ``grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(
            f"backward requires a scalar loss, got shape {loss.shape}")

    # Reachable tensors via recorded nodes, pruned at non-grad inputs.
    visited = {id(loss): loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for inp in t.node.inputs:
            if inp.requires_grad and id(inp) not in visited:
                visited[id(inp)] = inp
                stack.append(inp)

    # Reverse creation order is a topological order of the tape.
    order = sorted(visited.values(), key=lambda t: t.seq, reverse=True)

    table = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = table.get(id(t))
        if g is None or t.node is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            prev = table.get(id(inp))
            table[id(inp)] = ig if prev is None else prev + ig

    for t in order:
        g = table.get(id(t))
        if g is not None and t.requires_grad:
            t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# Elementwise / structural plumbing ops
# ---------------------------------------------------------------------------

def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(no implicit broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return make_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scale", (a,), a.data * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return make_op("shift", (a,), a.data + float(c), lambda g: (g,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op("sum", (a,), np.asarray(a.data.sum()),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return make_op("mean", (a,), np.asarray(a.data.mean()),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    data = a.data.reshape(shape)
    return make_op("reshape", (a,), data,
                   lambda g: (np.ascontiguousarray(g).reshape(old),))


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing dims must agree exactly."""
    if not parts:
        raise ShapeError("concat0: empty input list")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(
                f"concat0: trailing dims differ ({p.shape[1:]} vs {tail})")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        out = []
        o = 0
        for n in sizes:
            out.append(g[o:o + n])
            o += n
        return tuple(out)

    return make_op("concat0", tuple(parts), data, bwd)
