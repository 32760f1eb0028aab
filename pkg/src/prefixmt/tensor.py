"""Dense float tensors with a recorded tape for reverse-mode differentiation.

Every differentiable op appends one entry to a thread-local tape when any of its
inputs requires grad. ``backward`` walks that tape in exact reverse recording
order, so gradients are deterministic for a fixed sequence of ops.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

MASK_VALUE = float(np.finfo(np.float32).min)


class AutogradError(RuntimeError):
    pass


class TapeEntry:
    __slots__ = ("out", "parents", "backward_fn", "index")

    def __init__(self, out, parents, backward_fn, index):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index


class Tape:
    """Ordered record of differentiable ops; parents always precede children."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._base = 0  # global index of entries[0]

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> TapeEntry:
        entry = TapeEntry(out, parents, backward_fn, self._base + len(self.entries))
        self.entries.append(entry)
        return entry

    def __len__(self):
        return len(self.entries)

    def release_through(self, index: int) -> None:
        cut = index - self._base + 1
        if cut <= 0:
            return
        for e in self.entries[:cut]:
            e.out._entry = None
        self.entries = self.entries[cut:]
        self._base = index + 1

    def clear(self) -> None:
        for e in self.entries:
            e.out._entry = None
        self._base += len(self.entries)
        self.entries = []


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def get_tape() -> Tape:
    return _state.tape


def reset_tape() -> None:
    _state.tape.clear()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def precision(dtype):
    """Temporarily change the float type new tensors are created with.

    The library runs in float32; float64 is meant for gradient checking only.
    """
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def default_dtype():
    return _state.dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_entry", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_state.dtype)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._entry: Optional[TapeEntry] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._entry = _state.tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.shape}")
    entry = loss._entry
    if entry is None:
        if loss.requires_grad:
            raise AutogradError("loss graph was already consumed by a previous backward")
        raise AutogradError("loss is detached from the tape (nothing requires grad)")
    tape = _state.tape
    start = entry.index - tape._base
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for e in reversed(tape.entries[: start + 1]):
        g = grads.pop(id(e.out), None)
        if g is None:
            continue
        parent_grads = e.backward_fn(g)
        for p, pg in zip(e.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._entry is None:
                if key not in leaves and p.grad is not None:
                    raise AutogradError(
                        f"gradient of {p.name or 'leaf'} was not reset before backward"
                    )
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for key, leaf in leaves.items():
        leaf.grad = grads[key].astype(leaf.data.dtype, copy=False)
    tape.release_through(entry.index)


# ---------------------------------------------------------------- elementwise


def _suffix_broadcast(a_shape, b_shape) -> bool:
    return len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def add(a, b) -> Tensor:
    """Elementwise sum. ``b`` may match a trailing suffix of ``a`` (bias-style)."""
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _make(a.data + np.asarray(c, a.data.dtype), (a,), lambda g: (g,))
    a = _as_tensor(a)
    if a.shape != b.shape and not _suffix_broadcast(a.shape, b.shape):
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    bshape = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0)) if isinstance(b, Tensor) else add(a, -float(b))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a python number."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(float(b), a.data.dtype)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape and not _suffix_broadcast(a.shape, b.shape):
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    ad, bd, bshape = a.data, b.data, b.shape
    return _make(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, bshape)))


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an attention mask), numpy broadcasting."""
    out = x.data + np.asarray(c, x.data.dtype)
    if out.shape != x.shape:
        raise ValueError(f"constant of shape {np.shape(c)} would broadcast {x.shape} to {out.shape}")
    return _make(out, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0).astype(g.dtype),))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with a single shared slope (``slope`` has shape (1,))."""
    if slope.data.size != 1:
        raise ValueError("prelu expects a single shared slope")
    xd = x.data
    a = slope.data.reshape(())
    neg = xd <= 0

    def bw(g):
        gx = np.where(neg, g * a, g)
        ga = np.sum(np.where(neg, g * xd, 0)).reshape(slope.shape)
        return gx, ga

    return _make(np.where(neg, xd * a, xd), (x, slope), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or p <= 0:
        return x
    dt = x.data.dtype
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(dt) / np.asarray(1.0 - p, dt)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _make(np.sum(x.data, dtype=x.data.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % x.ndim
    return _make(np.sum(x.data, axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical, or ``b`` may be a plain matrix that is
    applied to every row of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if shared:
        # one large GEMM instead of numpy's per-batch loop
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), bw)

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.isfinite(xd).all():
        raise FloatingPointError("softmax received non-finite input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last dimension")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + np.asarray(eps, xd.dtype))
        xhat = np.nan_to_num(xc * inv) if eps == 0 else xc * inv
    gd = gain.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, np.asarray(eps, xd.dtype))
    y = xd / norm
    return _make(y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood over the positions not flagged in ``ignore_mask``.

    ``logits`` is (..., V) and is flattened to rows; ignored rows never enter the
    computation, so they contribute exactly zero to both value and gradient.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ValueError("cross_entropy: one target per logit row required")
    if ignore_mask is None:
        ignore_mask = np.zeros(targets.shape, dtype=bool)
    keep = np.flatnonzero(~np.asarray(ignore_mask, dtype=bool).reshape(-1))
    if keep.size == 0:
        raise ValueError("cross_entropy: every position is ignored, loss is empty")
    t = targets[keep]
    if t.min() < 0 or t.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    rows = flat[keep]
    shifted = rows - rows.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(keep.size), t]
    n = np.asarray(keep.size, flat.dtype)
    value = np.sum(nll, dtype=flat.dtype) / n
    lshape = logits.shape

    def bw(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(keep.size), t] -= 1
        full = np.zeros_like(flat)
        full[keep] = p * (g / n)
        return (full.reshape(lshape),)

    return _make(np.asarray(value, flat.dtype), (logits,), bw)
