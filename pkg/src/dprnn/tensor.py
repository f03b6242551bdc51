"""Dense arrays with tape-based reverse-mode differentiation.

Only the operations the matching model needs are provided. Every operation
works on an optional leading batch shape so that many image-text pairs can be
pushed through the model at once; elementwise operations still require equal
shapes (the only broadcasts are scalar scaling and the bias of ``linear``).

Recording happens only while a :class:`Tape` is active and at least one input
requires a gradient::

    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

EPS = 1e-8

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptySupportError(ValueError):
    """A masked softmax was asked to normalize over zero entries."""


class Tensor:
    """A numpy array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the operations executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(root)/d(t) into ``t.grad`` for every recorded tensor.

        Gradients of one call are gathered in a private buffer first, so that
        repeated calls accumulate into ``.grad`` without double counting.
        """
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        local: dict[int, np.ndarray] = {id(root): np.ones_like(root.data) if seed is None else seed}
        touched: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            g = local.pop(id(node), None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    local[id(node)] = g
                continue
            _accumulate(node, g)
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                touched[key] = parent
                if key in local:
                    local[key] = local[key] + pg
                else:
                    local[key] = pg
        for key, g in local.items():
            _accumulate(touched[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
        tape.record(out)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared by every batch entry of ``a``; a 1-D
    ``a`` is a row vector.
    """
    if a.data.ndim == 1 and b.data.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if bd.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _make(ad @ bd, (a, b), fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over every leading axis of ``x``."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(xd @ wd + b.data, (x, w, b), fn, "linear")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, (x,), lambda g: (g,), "shift")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def clamp_at_zero(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "clamp_at_zero")


relu = clamp_at_zero


def blend(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """``mask * a + (1 - mask) * b`` for a constant 0/1 mask broadcastable to ``a``."""
    _check_same(a, b, "blend")
    m = np.asarray(mask, dtype=a.data.dtype)
    inv = 1.0 - m
    return _make(m * a.data + inv * b.data, (a, b), lambda g: (g * m, g * inv), "blend")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "clamp_at_zero": clamp_at_zero,
    "scale": scale,
}


def elementwise(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named pointwise operations."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reductions and indexing


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    # flat left-to-right accumulation keeps the reduction order fixed
    total = np.add.reduce(x.data.reshape(-1)) if x.data.size else 0.0
    return _make(np.asarray(total, dtype=x.data.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),), "sum")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    ax = axis % len(shape)

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), fn, "sum_axis")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate on backward."""
    idx = np.asarray(index, dtype=np.intp)
    ax = axis % x.data.ndim
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _make(np.take(x.data, idx, axis=ax), (x,), fn, "take")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[b, r] = x[b, index[b, r]]`` for ``x`` of shape (B, R, ...)."""
    idx = np.asarray(index, dtype=np.intp)
    batch = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (batch, idx), g)
        return (out,)

    return _make(x.data[batch, idx], (x,), fn, "take_rows")


def select(x: Tensor, i: int, axis: int) -> Tensor:
    """Single index along ``axis`` (the axis is dropped)."""
    ax = axis % x.data.ndim
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = i
        out[tuple(sl)] = g
        return (out,)

    return _make(np.take(x.data, i, axis=ax), (x,), fn, "select")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _make(x.data[..., start:stop], (x,), fn, "slice_last")


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    data = np.stack([t.data for t in xs], axis=axis)
    ax = axis % data.ndim

    def fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _make(data, tuple(xs), fn, "stack")


# ---------------------------------------------------------------------------
# fused model primitives


def softmax_temp(x: Tensor, lam: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax of ``lam * x`` along the last axis; masked entries are exactly 0.

    ``mask`` is boolean, True for entries that take part in the softmax.
    """
    if lam < 0:
        raise ValueError(f"inverse temperature must be >= 0, got {lam}")
    z = lam * x.data
    if mask is None:
        m = None
        zmax = z.max(axis=-1, keepdims=True)
        e = np.exp(z - zmax)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=-1).all():
            raise EmptySupportError("softmax over a row with every entry masked")
        zmax = np.where(m, z, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, z - zmax, 0.0)), 0.0)
    y = e / np.add.reduce(e, axis=-1, keepdims=True)

    def fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (lam * y * (g - inner),)

    return _make(y, (x,), fn, "softmax_temp")


def _norm(d: np.ndarray) -> np.ndarray:
    return np.sqrt((d * d).sum(axis=-1))


def _safe_unit(d: np.ndarray, n: np.ndarray) -> np.ndarray:
    # d/dx ||x|| = x/||x||, taken as 0 at the zero vector
    return d / np.where(n > 0, n, 1.0)[..., None]


def cosine(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """Cosine along the last axis: ``a.b / (|a| |b| + eps)``; leading axes are kept."""
    _check_same(a, b, "cosine")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=-1)
    na, nb = _norm(ad), _norm(bd)
    den = na * nb + eps
    y = dot / den

    def fn(g):
        q = (g / den)[..., None]
        r = (g * dot / (den * den))[..., None]
        ga = q * bd - r * nb[..., None] * _safe_unit(ad, na) if a.requires_grad else None
        gb = q * ad - r * na[..., None] * _safe_unit(bd, nb) if b.requires_grad else None
        return ga, gb

    return _make(y, (a, b), fn, "cosine")


def cosine_matrix(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """All-pairs cosine between rows: (..., k, h) x (..., n, h) -> (..., k, n)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_matrix: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = ad @ np.swapaxes(bd, -1, -2)
    na, nb = _norm(ad), _norm(bd)
    den = na[..., :, None] * nb[..., None, :] + eps
    y = dot / den

    def fn(g):
        q = g / den
        r = g * dot / (den * den)
        ga = gb = None
        if a.requires_grad:
            ga = q @ bd - (r * nb[..., None, :]).sum(axis=-1)[..., None] * _safe_unit(ad, na)
        if b.requires_grad:
            gb = np.swapaxes(q, -1, -2) @ ad - (r * na[..., :, None]).sum(axis=-2)[..., None] * _safe_unit(bd, nb)
        return ga, gb

    return _make(y, (a, b), fn, "cosine_matrix")


def l2_normalize(x: Tensor, axis: int, eps: float = EPS) -> Tensor:
    """``x / sqrt(sum(x^2, axis) + eps^2)``."""
    d = x.data
    den = np.sqrt((d * d).sum(axis=axis, keepdims=True) + eps * eps)
    y = d / den

    def fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / den,)

    return _make(y, (x,), fn, "l2_normalize")
