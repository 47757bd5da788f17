"""Plain-numpy reference implementations used as test oracles.

Written loop-first and without the package's autograd so that agreement is
meaningful.
"""
import math

import numpy as np
from scipy.special import erf


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def layer_norm(x, scale, shift, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def linear(x, lin):
    y = x @ lin.weight.data
    return y + lin.bias.data if lin.bias is not None else y


def mlp(x, m):
    return linear(gelu(linear(x, m.fc1)), m.fc2)


def attention_rows(x, mha, allow=None):
    """Multi-head attention over rows of ``x`` ([S, d]); ``allow`` is a bool [S, S]."""
    S, d = x.shape
    h = mha.n_heads
    dh = d // h
    q, k, v = linear(x, mha.q), linear(x, mha.k), linear(x, mha.v)
    out = np.zeros((S, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(S):
            keys = [j for j in range(S) if allow is None or allow[i, j]]
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in keys])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, keys))
    return linear(out, mha.o)


def catten_delta(x, block, allow):
    a = attention_rows(layer_norm(x, block.ln1.scale.data, block.ln1.shift.data), block.attn, allow)
    y = x + a
    return a + mlp(layer_norm(y, block.ln2.scale.data, block.ln2.shift.data), block.ffn)


def predicate(q, k, M, T):
    """Visibility written from the prose rules, independently of the package."""
    vl = M + T
    q_is_vl, k_is_vl = q < vl, k < vl
    if q_is_vl and not k_is_vl:
        return False  # vision-language rows never see actions
    if q_is_vl:
        return k <= q  # causal prefix
    return True  # action rows see every column
