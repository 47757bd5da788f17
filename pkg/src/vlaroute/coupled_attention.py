"""Vision-language-action coupled attention and action-chunk decoding.

Sequence layout is ``[vision (M), language (T), action (K*D)]``.  The
vision-language prefix is causal, vision-language queries never see action
keys, and action queries see everything including each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Parameter
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention


def allowed(q, k, M, T, K, D, action_causal=False):
    """Visibility predicate of query position ``q`` towards key position ``k``."""
    vl = M + T
    if q < vl:
        return k <= q
    if k < vl:
        return True
    return k <= q if action_causal else True


def _allow_matrix(M, T, n_act, action_causal=False):
    vl = M + T
    s = vl + n_act
    allow = np.zeros((s, s), dtype=bool)
    allow[:vl, :vl] = np.tril(np.ones((vl, vl), dtype=bool))
    allow[vl:, :vl] = True
    if action_causal:
        allow[vl:, vl:] = np.tril(np.ones((n_act, n_act), dtype=bool))
    else:
        allow[vl:, vl:] = True
    return allow


def hybrid_additive(M, T, n_act, action_causal=False):
    """Additive mask (0 / -inf) for ``M`` vision, ``T`` language, ``n_act`` action rows."""
    allow = _allow_matrix(M, T, n_act, action_causal)
    return np.where(allow, 0.0, -np.inf)


@dataclass
class HybridMask:
    additive: np.ndarray
    M: int
    T: int
    K: int
    D: int

    @property
    def allow(self):
        return ~np.isneginf(self.additive)

    def render(self):
        return "\n".join("".join("1" if a else "0" for a in row) for row in self.allow)


def build_hybrid_mask(M, T, K, D):
    if min(M, T, K, D) < 1:
        raise ContractError(f"mask dims must be positive, got M={M} T={T} K={K} D={D}")
    return HybridMask(hybrid_additive(M, T, K * D), M, T, K, D)


def key_padding(t_pad, n_vis, n_act, batch):
    """Additive ``[B, 1, S]`` mask hiding padded instruction keys (zeros if none)."""
    T = 0 if t_pad is None else np.asarray(t_pad).shape[1]
    if t_pad is None or not np.any(t_pad):
        return np.zeros((1, 1, 1))
    out = np.zeros((batch, 1, n_vis + T + n_act))
    out[:, 0, n_vis:n_vis + T] = np.where(np.asarray(t_pad, dtype=bool), -np.inf, 0.0)
    return out


class CAttenBlock(Module):
    """Pre-norm transformer block driven by an explicit additive mask."""

    def __init__(self, rng, d, n_heads=1, ffn_mult=4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.ln2 = LayerNorm(d)
        self.ffn = MLP(rng, d, ffn_mult * d, d)
        self.ffn.fc2.weight.data *= 0.5

    def delta(self, x, mask):
        """Residual update ``attn + ffn`` without adding ``x`` back."""
        a = self.attn(self.ln1(x), mask)
        return a + self.ffn(self.ln2(x + a))

    def __call__(self, x, mask):
        return catten_layer(self, x, mask)


def catten_layer(block, x, mask):
    x = ag.as_tensor(x)
    additive = mask.additive if isinstance(mask, HybridMask) else np.asarray(mask)
    squeeze = x.ndim == 2
    if squeeze:
        x = ag.reshape(x, (1,) + x.shape)
    if additive.shape[-1] != x.shape[1]:
        raise ag.DimensionError(f"mask length {additive.shape[-1]} vs sequence {x.shape[1]}")
    out = x + block.delta(x, additive)
    return out[0] if squeeze else out


class ActionPlaceholders(Module):
    """Learned shared base vector plus per-slot offsets for the K*D action slots."""

    def __init__(self, rng, n_slots, d):
        self.base = Parameter(rng.normal(0.0, 0.02, d))
        self.offsets = Parameter(rng.normal(0.0, 0.02, (n_slots, d)))
        self.value_embed = Parameter(rng.normal(0.0, 1.0, d))
        self.n_slots = n_slots

    def __call__(self, batch):
        slots = self.offsets + self.base
        return ag.add(ag.Tensor(np.zeros((batch, 1, 1))), slots)


class ActionHead(Module):
    """Final norm and linear regression from each action slot to one coordinate."""

    def __init__(self, rng, d, squash_gripper=False):
        self.ln = LayerNorm(d)
        self.proj = Linear(rng, d, 1, std=0.02)
        self.squash_gripper = squash_gripper

    def __call__(self, a_rows, K, D):
        y = self.proj(self.ln(a_rows))
        b = y.shape[0]
        y = ag.reshape(y, (b, K, D))
        if self.squash_gripper:
            y = ag.concat([y[:, :, :D - 1], ag.sigmoid(y[:, :, D - 1:])], axis=2)
        return y


def parallel_decode(stack, head, placeholders, z0, t0, K, D, t_pad=None):
    """All ``K*D`` action coordinates from one pass through ``stack``."""
    b = z0.shape[0]
    acts = placeholders(b)
    _, _, acts = stack(z0, t0, acts, t_pad=t_pad)
    return head(acts, K, D)


def ar_decode_reference(stack, head, placeholders, z0, t0, K, D, t_pad=None):
    """Coordinate-by-coordinate decoding: ``K*D`` passes, causal over actions.

    Pass ``i`` feeds the ``i`` coordinates produced so far (embedded through
    ``value_embed``) plus one query slot, and reads the query slot's output.
    """
    b = z0.shape[0]
    n = K * D
    slots = placeholders.offsets.data + placeholders.base.data
    values = np.zeros((b, 0))
    out_head = ActionHead.__new__(ActionHead)
    out_head.ln, out_head.proj, out_head.squash_gripper = head.ln, head.proj, False
    for i in range(n):
        prev = values[:, :, None] * placeholders.value_embed.data + slots[:i]
        rows = np.concatenate([prev, np.broadcast_to(slots[i], (b, 1, slots.shape[1]))], axis=1)
        _, _, acts = stack(z0, t0, ag.Tensor(rows), t_pad=t_pad, action_causal=True)
        coord = out_head(acts[:, i:i + 1, :], 1, 1).data.reshape(b, 1)
        values = np.concatenate([values, coord], axis=1)
    chunk = values.reshape(b, K, D)
    if head.squash_gripper:
        chunk[:, :, D - 1] = 1.0 / (1.0 + np.exp(-chunk[:, :, D - 1]))
    return ag.Tensor(chunk)
