"""Dense 4-D tensors with reverse-mode automatic differentiation.

Everything is float32 and shaped (batch, channels, height, width). Operations
executed outside a ``no_grad()`` block are recorded on a thread-local tape
(:class:`GraphRecord`); ``backward(loss)`` replays the tape in reverse once and
deposits gradients on the leaves, then consumes the tape.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ConfigError(TensorError):
    """Invalid operand shapes or op parameters."""


class UsageError(TensorError):
    """API misuse, e.g. backward on a non-scalar or a consumed graph."""


class NonFiniteError(TensorError):
    """A forward op produced NaN/Inf; carries the producing op's name."""

    def __init__(self, op_name: str):
        super().__init__(f"non-finite values produced by op '{op_name}'")
        self.op_name = op_name


_node_ids = itertools.count(1)
_ctx = threading.local()

# Finite checks on every recorded forward; tests may disable to provoke NaNs.
CHECK_FINITE = True


def _state():
    if not hasattr(_ctx, "graph"):
        _ctx.graph = None
        _ctx.no_grad_depth = 0
    return _ctx


def active_graph() -> "GraphRecord":
    st = _state()
    if st.graph is None or st.graph.consumed:
        st.graph = GraphRecord()
    return st.graph


def grad_enabled() -> bool:
    return _state().no_grad_depth == 0


class no_grad:
    """Context manager suspending graph recording (detached forwards)."""

    def __enter__(self):
        _state().no_grad_depth += 1
        return self

    def __exit__(self, *exc):
        _state().no_grad_depth -= 1
        return False


class _OpRecord:
    __slots__ = ("name", "inputs", "output_id", "backward_fn", "needs")

    def __init__(self, name, inputs, output_id, backward_fn, needs):
        self.name = name
        self.inputs = inputs          # tuple of input Tensors
        self.output_id = output_id
        self.backward_fn = backward_fn  # (grad_out, needs) -> per-input grads
        self.needs = needs            # which inputs take part in the grad flow


class GraphRecord:
    """Tape of recorded ops, in execution (hence topological) order."""

    def __init__(self):
        self.ops: list[_OpRecord] = []
        self.producer: dict[int, int] = {}  # output node_id -> op index
        self.consumed = False

    def record(self, op: _OpRecord):
        self.producer[op.output_id] = len(self.ops)
        self.ops.append(op)

    def backward(self, loss: "Tensor"):
        if self.consumed:
            raise UsageError("graph already consumed by a previous backward; run a new forward")
        if loss.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.node_id not in self.producer:
            raise UsageError("loss was not produced by the active graph")

        # Mark ops reachable from the loss.
        needed = [False] * len(self.ops)
        stack = [self.producer[loss.node_id]]
        while stack:
            i = stack.pop()
            if needed[i]:
                continue
            needed[i] = True
            for t in self.ops[i].inputs:
                j = self.producer.get(t.node_id)
                if j is not None and not needed[j]:
                    stack.append(j)

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for i in range(len(self.ops) - 1, -1, -1):
            if not needed[i]:
                continue
            op = self.ops[i]
            g_out = grads.pop(op.output_id, None)
            if g_out is None:
                continue
            in_grads = op.backward_fn(g_out, op.needs)
            for t, g in zip(op.inputs, in_grads):
                if g is None:
                    continue
                if t.node_id in self.producer:
                    acc = grads.get(t.node_id)
                    grads[t.node_id] = g if acc is None else acc + g
                elif t.requires_grad:
                    t.grad += g.astype(np.float32, copy=False)

        self.consumed = True
        self.ops.clear()
        self.producer.clear()


class Tensor:
    """A float32 (N, C, H, W) array, optionally tracked by the active graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ConfigError(f"tensors are 4-D (N,C,H,W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; heavy ops live in flowpatch.ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float32))


def record_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray, tuple], tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    """Wrap a raw forward result as a graph node.

    ``backward_fn`` receives (dLoss/dOut, needs) and must return one gradient
    (or None) per input; entries with needs[i] False may be skipped (None).
    Under ``no_grad`` nothing is recorded and the output does not require grad.
    """
    if CHECK_FINITE and not np.isfinite(out_data).all():
        raise NonFiniteError(name)
    out = Tensor(out_data)
    if not grad_enabled():
        return out
    producers = _producer_ids()
    needs = tuple(t.requires_grad or t.node_id in producers for t in inputs)
    if any(needs):
        active_graph().record(_OpRecord(name, tuple(inputs), out.node_id, backward_fn, needs))
    return out


def _producer_ids():
    st = _state()
    if st.graph is None or st.graph.consumed:
        return ()
    return st.graph.producer


def backward(loss: Tensor):
    """Populate leaf gradients from a scalar loss; consumes the active graph."""
    st = _state()
    if st.graph is None:
        raise UsageError("no active graph; run a forward pass first")
    st.graph.backward(loss)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        return record_op("add_scalar", [t], t.data + np.float32(c), lambda g, nd: (g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record_op(
        "add", [a, b], out,
        lambda g, nd: (
            _unbroadcast(g, a.data.shape) if nd[0] else None,
            _unbroadcast(g, b.data.shape) if nd[1] else None,
        ),
    )


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record_op(
        "sub", [a, b], out,
        lambda g, nd: (
            _unbroadcast(g, a.data.shape) if nd[0] else None,
            _unbroadcast(-g, b.data.shape) if nd[1] else None,
        ),
    )


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        c = np.float32(c)
        return record_op("mul_scalar", [t], t.data * c, lambda g, nd: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record_op(
        "mul", [a, b], out,
        lambda g, nd: (
            _unbroadcast(g * b.data, a.data.shape) if nd[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if nd[1] else None,
        ),
    )


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return record_op(
        "div", [a, b], out,
        lambda g, nd: (
            _unbroadcast(g / b.data, a.data.shape) if nd[0] else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if nd[1] else None,
        ),
    )


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record_op("sqrt", [a], out, lambda g, nd: (g * (0.5 / out),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, nd):
        parts = np.split(g, splits, axis=axis)
        return tuple(np.ascontiguousarray(p) if need else None for p, need in zip(parts, nd))

    return record_op("concat", tensors, out, bwd)


def batch_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the batch axis (recorded)."""
    a = as_tensor(a)
    N = a.data.shape[0]
    out = np.ascontiguousarray(a.data[start:stop])

    def bwd(g, nd):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return record_op("batch_slice", [a], out, bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum over all elements -> scalar (1,1,1,1); accumulates in float64."""
    a = as_tensor(a)
    out = np.array(a.data.sum(dtype=np.float64), dtype=np.float32).reshape(1, 1, 1, 1)
    return record_op("sum", [a], out, lambda g, nd: (np.broadcast_to(g.reshape(()), a.data.shape).astype(np.float32),))


def tmean(a: Tensor) -> Tensor:
    """Mean over all elements -> scalar (1,1,1,1); accumulates in float64."""
    a = as_tensor(a)
    n = a.data.size
    out = np.array(a.data.sum(dtype=np.float64) / n, dtype=np.float32).reshape(1, 1, 1, 1)

    def bwd(g, nd):
        return (np.broadcast_to(g.reshape(()) / np.float32(n), a.data.shape).astype(np.float32),)

    return record_op("mean", [a], out, bwd)
