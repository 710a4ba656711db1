"""Dense float64 tensors with scoped reverse-mode differentiation.

Gradient flow is recorded on an explicit :class:`Tape`. Operations whose
inputs are watched (or derive from watched tensors) append pullback closures,
and ``Tape.grad`` replays them in reverse creation order, accumulating
adjoints additively across fan-out. Pullbacks are themselves written in terms
of the primitive operations, so with ``create_graph=True`` the backward pass
is recorded too and can be differentiated again (Hessian-vector products,
backprop through unrolled optimization loops).

Tensors are immutable values: no operation in this package writes to
``Tensor.data`` after construction, and wrapped arrays must not be mutated by
the caller. A tape is single-owner; independent tapes may run concurrently in
separate threads (the active-tape stack is thread-local).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "TapeClosedError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "relu",
    "exp",
    "softmax",
    "log_softmax",
    "tsum",
    "tmean",
    "clip",
    "sign",
    "slice1d",
    "scatter1d",
    "slice_cols",
    "pad_cols",
    "finite_diff_grad",
]


class TensorError(ValueError):
    """Shape mismatch or non-finite values in a tensor operation."""


class TapeClosedError(RuntimeError):
    """Gradient requested from a tape whose scope has already exited."""


_STATE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise TensorError("non-finite values are not allowed in tensors")
    return arr


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_array(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class _Node:
    __slots__ = ("out_id", "parent_ids", "pullbacks")

    def __init__(self, out_id, parent_ids, pullbacks):
        self.out_id = out_id
        self.parent_ids = parent_ids
        self.pullbacks = pullbacks


class Tape:
    """Ordered record of primitive operations for one reverse-mode pass.

    Use as a context manager; watch the leaves whose gradients are needed,
    build the computation, then call :meth:`grad` while the scope is open.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []  # strong refs keep id() keys unique
        self._recording = True
        self._closed = False

    def __enter__(self) -> "Tape":
        if self._closed:
            raise TapeClosedError("tape scope already exited")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._closed = True
        return False

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf tensor so gradients can flow to it."""
        if not isinstance(tensor, Tensor):
            raise TensorError("only Tensor values can be watched")
        if id(tensor) not in self._ids:
            self._register(tensor)
        return tensor

    def _register(self, tensor: Tensor) -> int:
        nid = len(self._tensors)
        self._ids[id(tensor)] = nid
        self._tensors.append(tensor)
        return nid

    def node_id(self, tensor: Tensor):
        return self._ids.get(id(tensor))

    def _record(self, out: Tensor, entries) -> None:
        out_id = self._register(out)
        self._nodes.append(
            _Node(out_id, tuple(e[0] for e in entries), tuple(e[1] for e in entries))
        )

    @contextlib.contextmanager
    def stop_recording(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def grad(self, loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False):
        """Return d(loss)/d(t) for each tensor in ``wrt``.

        Nodes on the tape but unreachable from ``loss`` get zero gradients.
        With ``create_graph=True`` the backward computation is recorded so
        the returned gradients can be differentiated again.
        """
        if self._closed:
            raise TapeClosedError("cannot take gradients after the tape scope exited")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            got = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise TensorError(f"loss must be a scalar tensor, got {got}")
        wrt = list(wrt)
        for t in wrt:
            if self.node_id(t) is None:
                raise TensorError(
                    "gradient requested for a tensor that is not on this tape; "
                    "watch() it before building the computation"
                )
        adjoints: dict[int, Tensor] = {}
        loss_id = self.node_id(loss)
        if loss_id is not None:
            adjoints[loss_id] = Tensor(np.ones_like(loss.data))
        ctx = contextlib.nullcontext() if create_graph else self.stop_recording()
        with ctx:
            for node in reversed(self._nodes):
                out_adj = adjoints.get(node.out_id)
                if out_adj is None:
                    continue
                for pid, pull in zip(node.parent_ids, node.pullbacks):
                    contrib = pull(out_adj)
                    prev = adjoints.get(pid)
                    adjoints[pid] = contrib if prev is None else add(prev, contrib)
        out = []
        for t in wrt:
            a = adjoints.get(self.node_id(t))
            out.append(a if a is not None else Tensor(np.zeros_like(t.data)))
        return out


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record_result(out: Tensor, pulls) -> Tensor:
    """Record ``out`` on the active tape when at least one parent is watched.

    ``pulls`` is a sequence of ``(parent_tensor, pullback)`` pairs where each
    pullback maps the output adjoint to that parent's adjoint contribution.
    """
    tape = _active_tape()
    if tape is not None and tape._recording:
        entries = []
        for parent, pull in pulls:
            pid = tape.node_id(parent)
            if pid is not None:
                entries.append((pid, pull))
        if entries:
            tape._record(out, entries)
    return out


def _apply(out_data, pulls) -> Tensor:
    return _record_result(Tensor(out_data), pulls)


def _unbroadcast(adj: Tensor, shape) -> Tensor:
    """Reduce ``adj`` back to ``shape`` by summing over broadcast axes."""
    if adj.shape == tuple(shape):
        return adj
    extra = adj.ndim - len(shape)
    t = adj
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.shape != tuple(shape):
        t = reshape(t, shape)
    return t


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError(
            f"cannot {opname} shapes {a.shape} and {b.shape}"
        ) from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _apply(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "subtract")
    return _apply(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(scale(g, -1.0), b.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "multiply")
    return _apply(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(mul(g, b), a.shape)),
            (b, lambda g: _unbroadcast(mul(g, a), b.shape)),
        ],
    )


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    if not np.isfinite(c):
        raise TensorError("scale factor must be finite")
    return _apply(a.data * c, [(a, lambda g: scale(g, c))])


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"cannot matmul shapes {a.shape} and {b.shape}")
    return _apply(
        a.data @ b.data,
        [
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ],
    )


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise TensorError(f"transpose needs a 2-d tensor, got shape {a.shape}")
    return _apply(a.data.T.copy(), [(a, lambda g: transpose(g))])


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape)) != a.size:
        raise TensorError(f"cannot reshape {a.shape} into {shape}")
    old = a.shape
    return _apply(a.data.reshape(shape), [(a, lambda g: reshape(g, old))])


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise TensorError(f"cannot broadcast shape {a.shape} to {shape}") from None
    return _apply(np.ascontiguousarray(out), [(a, lambda g: _unbroadcast(g, a.shape))])


def relu(a) -> Tensor:
    a = _lift(a)
    mask = Tensor((a.data > 0).astype(np.float64))  # subgradient 0 at the kink
    return _apply(np.maximum(a.data, 0.0), [(a, lambda g: mul(g, mask))])


def exp(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.exp(a.data))
    return _record_result(out, [(a, lambda g: mul(g, out))])


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / np.sum(e, axis=axis, keepdims=True))

    def pull(g):
        inner = tsum(mul(g, out), axis=axis, keepdims=True)
        return mul(out, sub(g, inner))

    return _record_result(out, [(a, pull)])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = Tensor(z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True)))

    def pull(g):
        total = tsum(g, axis=axis, keepdims=True)
        return sub(g, mul(exp(out), total))

    return _record_result(out, [(a, pull)])


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = np.sum(a.data, axis=axes if axes else None, keepdims=keepdims)
    in_shape = a.shape

    def pull(g):
        if not keepdims:
            kept = list(in_shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        return broadcast_to(g, in_shape)

    return _apply(out_data, [(a, pull)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else a.size
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    lo, hi = float(lo), float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise TensorError(f"invalid clip interval [{lo}, {hi}]")
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _apply(np.clip(a.data, lo, hi), [(a, lambda g: mul(g, mask))])


def sign(a) -> Tensor:
    # gradient is zero everywhere, so the result is a plain constant
    a = _lift(a)
    return Tensor(np.sign(a.data))


def slice1d(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise TensorError(f"slice1d needs a 1-d tensor, got shape {a.shape}")
    n = a.size
    if not (0 <= start <= stop <= n):
        raise TensorError(f"slice [{start}:{stop}] out of range for length {n}")
    return _apply(a.data[start:stop].copy(), [(a, lambda g: scatter1d(g, start, n))])


def scatter1d(a, start: int, total: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise TensorError(f"scatter1d needs a 1-d tensor, got shape {a.shape}")
    stop = start + a.size
    if not (0 <= start <= stop <= total):
        raise TensorError(f"cannot scatter length {a.size} at {start} into {total}")
    out = np.zeros(total, dtype=np.float64)
    out[start:stop] = a.data
    return _apply(out, [(a, lambda g: slice1d(g, start, stop))])


def slice_cols(a, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise TensorError(f"slice_cols needs a 2-d tensor, got shape {a.shape}")
    total = a.shape[1]
    if not (0 < stop <= total):
        raise TensorError(f"column slice [:{stop}] out of range for width {total}")
    return _apply(a.data[:, :stop].copy(), [(a, lambda g: pad_cols(g, total))])


def pad_cols(a, total: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise TensorError(f"pad_cols needs a 2-d tensor, got shape {a.shape}")
    rows, cols = a.shape
    if total < cols:
        raise TensorError(f"cannot pad width {cols} down to {total}")
    out = np.zeros((rows, total), dtype=np.float64)
    out[:, :cols] = a.data
    return _apply(out, [(a, lambda g: slice_cols(g, cols))])


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise TensorError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.reshape(-1)[i] = h
        fp = float(f(x + e))
        fm = float(f(x - e))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise TensorError(f"non-finite function value near coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
