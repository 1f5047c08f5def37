"""Minimal reverse-mode autodiff over numpy arrays.

Operations executed inside a ``Tape`` context are recorded in order;
``Tape.backward`` replays them in reverse and accumulates gradients into
every tensor created with ``requires_grad=True``.  Outside a tape nothing is
recorded, which is how inference runs.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(matmul(Tensor(np.eye(2)), w))
    >>> tape.backward(loss)
    >>> w.grad
    array([[0.25, 0.25],
           [0.25, 0.25]])
"""
from __future__ import annotations

import contextvars
import math

import numpy as np

from .errors import NumericError, ShapeError

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("damgt_tape", default=None)

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data if isinstance(data, np.ndarray) else np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed primitives; replayable backward exactly once."""

    def __init__(self):
        self.records: list = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, grad=None) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self.consumed = True
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, parents, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                p.grad = gp if p.grad is None else p.grad + gp
        self.records.clear()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _op(data, parents, backward, name=None) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, name=name)
    tape = _active_tape.get()
    if needs and tape is not None:
        out.requires_grad = True
        tape.records.append((out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of a loop of small ones over the batch dimensions
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        try:
            data = np.matmul(a.data, b.data)
        except ValueError:
            raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            k, m = b.shape
            g2 = g.reshape(-1, m)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _op(data, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _op(data, tuple(ts), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    data = np.take(a.data, idx, axis=axis)

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _op(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = _wrap(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _op(data, (a,), lambda g: (g.reshape(a.shape),))


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable) marks the permitted entries; the others
    behave as logits of -inf and receive probability exactly 0.  A row with
    no permitted entry outputs all zeros and passes back zero gradient.
    """
    a = _wrap(a)
    x = a.data
    if mask is None:
        mx = x.max(axis=-1, keepdims=True)
        e = np.exp(x - mx)
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        xm = np.where(mask, x, -np.inf)
        mx = xm.max(axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x - mx, 0.0)), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _op(p, (a,), backward)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a finite constant."""
    a = _wrap(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, value, a.data).astype(a.dtype, copy=False)
    return _op(data, (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last (feature) axis, then apply gain and bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _op(data, (x, gain, bias), backward)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _op(data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    pos = a.data > 0
    # np.maximum keeps NaN visible; a where(x > 0) form would silently zero it
    return _op(np.maximum(a.data, 0.0).astype(a.dtype, copy=False), (a,),
               lambda g: (np.where(pos, g, 0.0).astype(g.dtype, copy=False),))


def dropout(a, keep: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``keep >= 1`` or not training."""
    a = _wrap(a)
    if not training or keep >= 1.0:
        return a
    if not 0.0 < keep < 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    m = (rng.random(a.shape) < keep).astype(a.dtype) / keep
    return _op(a.data * m, (a,), lambda g: (g * m,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(np.asarray(data), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy of (batch, classes) logits against integer targets."""
    logits = _wrap(logits)
    y = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    mx = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - mx).sum(axis=1, keepdims=True)) + mx
    b = len(y)
    loss = (lse[:, 0] - z[np.arange(b), y]).mean()

    def backward(g):
        p = np.exp(z - lse)
        p[np.arange(b), y] -= 1.0
        return (p * (g / b),)

    return _op(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f()`` wrt ``x`` and central differences.

    ``f`` takes no arguments and must rebuild its computation from the current
    ``x.data`` on each call (any randomness reseeded inside ``f``).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = x.grad.copy()
    x.requires_grad = was
    if not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite analytic gradient")
    numeric = np.zeros_like(analytic)
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("non-finite finite-difference gradient")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))) if analytic.size else 0.0
