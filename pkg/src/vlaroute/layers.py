"""Parameter containers and the standard transformer pieces built on autograd."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter


class Module:
    """Minimal parameter container.

    Parameters, sub-modules and lists of sub-modules stored as attributes are
    discovered in attribute-definition order.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=ag.DTYPE)
            if value.shape != p.shape:
                raise ag.DimensionError(f"{name}: shape {value.shape} != {p.shape}")
            p.data[...] = value


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, std=None, zero=False):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x):
        x = ag.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ag.DimensionError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        y = ag.matmul(x, self.weight) if x.ndim >= 2 else ag.reshape(
            ag.matmul(ag.reshape(x, (1, -1)), self.weight), (self.d_out,))
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d):
        self.scale = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))

    def __call__(self, x):
        return ag.layer_norm(x, self.scale, self.shift)


class MLP(Module):
    """Two linear maps with a GeLU between them."""

    def __init__(self, rng, d_in, hidden, d_out, zero_out=False):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, d_out, zero=zero_out)

    def __call__(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention; each head runs masked_scaled_dot_attention."""

    def __init__(self, rng, d, n_heads=1, q_std=None):
        if d % n_heads:
            raise ag.DimensionError(f"width {d} not divisible by {n_heads} heads")
        self.q = Linear(rng, d, d, std=q_std)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.n_heads = n_heads
        self.d = d
        self.last_weights = None

    def _split(self, x):
        b, s, _ = x.shape
        h = self.n_heads
        return ag.transpose(ag.reshape(x, (b, s, h, self.d // h)), (0, 2, 1, 3))

    def __call__(self, x, mask=None, keep_weights=False):
        x = ag.as_tensor(x)
        if x.ndim == 2:
            return self(ag.reshape(x, (1,) + x.shape), mask, keep_weights)[0]
        b, s, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if mask is not None:
            mask = np.asarray(mask)
            if mask.ndim == 3:
                mask = mask[:, None]
        out = ag.masked_scaled_dot_attention(q, k, v, mask)
        if keep_weights:
            self.last_weights = attention_weights(q.data, k.data, mask)
        merged = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, s, self.d))
        return self.o(merged)


def attention_weights(q, k, mask=None):
    """Softmax attention probabilities as a plain array (diagnostics only)."""
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits + mask
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)
