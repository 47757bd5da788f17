"""Small reverse-mode autodiff kernel on top of numpy.

Every primitive computes its forward value eagerly.  When a :class:`Tape` is
active and at least one input requires a gradient, the primitive also records
a node holding its inputs and a closure that maps the output gradient to
input gradients.  :func:`backward` replays the tape in reverse order.

All arrays are float64 unless stated otherwise.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class DegenerateMaskError(ValueError):
    """Raised when an attention mask leaves a query row with no allowed key."""


_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes = []
        self.visited = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class _MatmulCounter:
    def __init__(self):
        self.macs = 0


@contextmanager
def count_matmuls():
    """Count multiply-accumulates performed by :func:`matmul` in the block."""
    counter = _MatmulCounter()
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _count(macs):
    for c in getattr(_state, "counters", ()):
        c.macs += macs


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Learnable tensor.  Its gradient is always allocated and accumulates."""

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape, loss):
    """Propagate d(loss) into every reachable tensor that requires a gradient.

    Parameter gradients accumulate on top of whatever they already hold.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    tape.visited = 0
    for out, parents, fn in reversed(tape.nodes):
        tape.visited += 1
        g = out.grad
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.data.shape)
            if p.grad is None:
                p.grad = np.array(pg, dtype=DTYPE, copy=True)
            else:
                p.grad = p.grad + pg
        if out is not loss:
            out.grad = None


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def tabs(x):
    x = as_tensor(x)
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


def matmul(a, b):
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    _count(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)
    ad, bd = a.data, b.data

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), fn)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), fn)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def gather_rows(x, idx):
    """Select rows ``x[b, idx[b]]`` from a ``[B, M, d]`` tensor; idx is ``[B, r]``."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    b = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, (b, idx), g)
        return (full,)

    return _make(x.data[b, idx], (x,), fn)


def scatter_add_rows(base, idx, src):
    """Return ``base`` with ``src[b, i]`` added into row ``idx[b, i]``.

    Rows not named in ``idx`` are copied from ``base`` untouched.
    """
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(idx)
    b = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[b, idx] += src.data
    return _make(out, (base, src), lambda g: (g, g[b, idx]))


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), fn)


# --------------------------------------------------------------- nonlinear


def gelu(x):
    """Exact GeLU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def fn(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return _make(xd * cdf, (x,), fn)


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), fn)


def layer_norm(x, scale, shift, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a feature width of at least 2")
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm affine shape mismatch for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    sd = scale.data

    def fn(g):
        gxhat = g * sd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return _make(xhat * sd + shift.data, (x, scale, shift), fn)


def masked_scaled_dot_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is an additive array broadcastable to ``[..., n, m]`` holding 0,
    -inf or finite biases.  A query row with every key at -inf raises
    :class:`DegenerateMaskError`.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    logits = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=DTYPE)
        if mask.shape[-2:] != logits.shape[-2:]:
            raise DimensionError(f"mask shape {mask.shape} vs logits {logits.shape}")
        if np.isneginf(mask).all(axis=-1).any():
            raise DegenerateMaskError("attention mask has a row with no allowed key")
        logits = add(logits, mask)
    return matmul(softmax(logits, axis=-1), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
