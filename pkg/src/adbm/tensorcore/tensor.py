"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

Operations run eagerly on numpy arrays. When a :class:`GradientTape` is
active and an operation touches a tracked tensor, a node holding the
vector-Jacobian product is appended to the tape. ``backward`` walks the
nodes in reverse recording order and accumulates gradients additively.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array that can take part in recorded computations."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self._set(np.array(data, dtype=np.float64), requires_grad, name)

    def _set(self, arr: np.ndarray, requires_grad: bool, name: str | None) -> None:
        # a finite sum implies finite entries; the full scan runs only on the rare miss
        if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''} of shape {arr.shape}")
        if arr.flags.writeable:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t._set(np.asarray(arr, dtype=np.float64), False, None)
        return t

    # -- inspection ---------------------------------------------------------
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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tapes
# ---------------------------------------------------------------------------

_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def _stats() -> dict:
    st = getattr(_local, "stats", None)
    if st is None:
        st = _local.stats = {"live": 0, "peak": 0}
    return st


def activation_stats() -> dict:
    """Current and peak number of node outputs held by live tapes (this thread)."""
    return dict(_stats())


def reset_activation_stats() -> None:
    st = _stats()
    st["peak"] = st["live"]


class _Node:
    # vjp(g) returns one entry per input: an array, None, or a zero-argument
    # callable that is only evaluated when that input needs a gradient
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradientTape:
    """Ordered record of primitive operations.

    A tape in ``"recording"`` mode stores every node that depends on a
    tracked tensor. ``"replaying"`` mode stores nothing; it is used while a
    checkpointed segment runs forward and only notes which external tracked
    tensors the segment reads.
    """

    RECORDING = "recording"
    REPLAYING = "replaying"

    def __init__(self, mode: str = RECORDING):
        if mode not in (self.RECORDING, self.REPLAYING):
            raise ValueError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        # replaying mode bookkeeping
        self._internal: set[int] = set()
        self.captured: dict[int, Tensor] = {}
        self._released = False

    def __enter__(self) -> "GradientTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if not st or st[-1] is not self:
            raise TapeError("tape stack corrupted")
        st.pop()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._leaves[id(t)] = t

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, inputs: tuple, out: Tensor, vjp: Callable) -> None:
        if self.mode == self.REPLAYING:
            for x in inputs:
                if id(x) in self._internal:
                    continue
                if x.requires_grad or _tracked_outside(self, x):
                    self.captured.setdefault(id(x), x)
            self._internal.add(id(out))
            return
        if not any(self.tracks(x) for x in inputs):
            return
        for x in inputs:
            if x.requires_grad and id(x) not in self._leaves:
                self._leaves[id(x)] = x
                self._tracked.add(id(x))
        self.nodes.append(_Node(op, inputs, out, vjp))
        self._tracked.add(id(out))
        st = _stats()
        st["live"] += 1
        if st["live"] > st["peak"]:
            st["peak"] = st["live"]

    def release(self) -> None:
        """Drop stored nodes and return their count to the activation counter."""
        if not self._released:
            _stats()["live"] -= len(self.nodes)
            self._released = True
        self.nodes = []

    def __del__(self):
        try:
            self.release()
        except Exception:
            pass


def _tracked_outside(tape: GradientTape, x: Tensor) -> bool:
    for other in _stack():
        if other is not tape and other.mode == GradientTape.RECORDING and id(x) in other._tracked:
            return True
    return False


def _active() -> GradientTape | None:
    st = _stack()
    return st[-1] if st else None


class paused:
    """Context manager that suspends recording on every active tape."""

    def __enter__(self):
        st = _stack()
        self._saved = list(st)
        st.clear()
        return self

    def __exit__(self, *exc):
        st = _stack()
        st.clear()
        st.extend(self._saved)


def _emit(op: str, inputs: tuple, out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _active()
    if tape is not None:
        tape._record(op, inputs, out, vjp)
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _backprop(tape: GradientTape, seeds: Sequence[tuple[Tensor, np.ndarray]],
              wrt: Sequence[Tensor]) -> dict[int, np.ndarray]:
    relevant = {id(w) for w in wrt}
    live = []
    for node in tape.nodes:
        if any(id(x) in relevant for x in node.inputs):
            relevant.add(id(node.output))
            live.append(node)
    grads: dict[int, np.ndarray] = {}
    for t, g in seeds:
        grads[id(t)] = np.asarray(g, dtype=np.float64)
    for node in reversed(live):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or id(x) not in relevant:
                continue
            if callable(gx):
                gx = gx()
            prev = grads.get(id(x))
            grads[id(x)] = gx if prev is None else prev + gx
    return grads


def backward(tape: GradientTape, loss: Tensor,
             wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradient of a scalar ``loss`` with respect to ``wrt`` (default: all tape leaves).

    Tensors in ``wrt`` that do not influence the loss get zero gradients.
    """
    if tape.mode != GradientTape.RECORDING:
        raise TapeError(f"backward needs a recording tape, this one is {tape.mode!r}")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    targets = tape.leaves if wrt is None else list(wrt)
    grads = _backprop(tape, [(loss, np.ones_like(loss.data))], targets)
    out = {}
    for w in targets:
        g = grads.get(id(w))
        out[w] = Tensor(np.zeros_like(w.data) if g is None else np.broadcast_to(g, w.shape))
    return out


def grad(tape: GradientTape, loss: Tensor, x: Tensor) -> np.ndarray:
    """Convenience: gradient of ``loss`` w.r.t. a single tensor as a numpy array."""
    return backward(tape, loss, [x])[x].data


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (lambda: _unbroadcast(g, sa), lambda: _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (lambda: _unbroadcast(g, sa), lambda: _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (lambda: _unbroadcast(g * bd, ad.shape),
                            lambda: _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (lambda: _unbroadcast(g / bd, ad.shape),
                            lambda: _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (lambda: g @ bd.T, lambda: ad.T @ g))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _emit("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)
    return _emit("mean", (a,), np.mean(a.data, axis=axis, keepdims=keepdims), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
    return _emit("silu", (a,), x * s, lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return _emit("clamp", (a,), np.clip(x, lo, hi), lambda g: (g * mask,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table, idx) -> Tensor:
    """Row gather ``table[idx]`` (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= table.shape[0]:
        raise IndexError(f"take_rows: index out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return _emit("take_rows", (table,), table.data[idx], vjp)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of 2-D ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lsm = log_softmax_np(logits.data)
    rows = np.arange(len(labels))
    per = -lsm[rows, labels]
    n = len(labels)

    def vjp(g):
        p = np.exp(lsm)
        p[rows, labels] -= 1.0
        if reduction == "none":
            return (p * g[:, None],)
        return (p * (g / n if reduction == "mean" else g),)
    if reduction == "mean":
        out = per.mean()
    elif reduction == "sum":
        out = per.sum()
    elif reduction == "none":
        out = per
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _emit("cross_entropy", (logits,), np.asarray(out), vjp)


def custom(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    """Record an arbitrary node; used by the checkpointing machinery."""
    return _emit(op, tuple(inputs), out_data, vjp)
