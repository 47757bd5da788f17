"""Instruction-conditioned aggregation inside the vision encoders.

Each encoder branch appends a small set of learned aggregation slots to its
patch tokens.  Every block runs joint self-attention over ``[patches; slots]``,
modulates the attention output with FiLM parameters predicted from the pooled
instruction, applies a feed-forward map and adds the result residually.  Only
the slots leave the encoder.  The two branches are then mixed by a gate that
also reads the instruction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DimensionError, Parameter, Tensor
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention


@dataclass
class FilmParams:
    scale: Tensor  # gamma, [..., d]
    shift: Tensor  # beta, [..., d]


def pool_instruction(tokens, pad_mask=None):
    """Mean of instruction token rows, skipping padding.

    ``tokens`` is ``[B, T, d]``; ``pad_mask`` is a boolean ``[B, T]`` array that
    is True at padding positions.
    """
    tokens = ag.as_tensor(tokens)
    if pad_mask is None:
        return ag.tmean(tokens, axis=1)
    keep = (~np.asarray(pad_mask, dtype=bool)).astype(float)
    counts = keep.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("instruction has no non-padding tokens")
    return ag.tsum(tokens * keep[:, :, None], axis=1) * (1.0 / counts)


class FilmGenerator(Module):
    """Affine maps from the instruction vector to FiLM scale and shift."""

    def __init__(self, rng, d_text, d_feat, zero=True):
        self.gamma = Linear(rng, d_text, d_feat, zero=zero)
        self.beta = Linear(rng, d_text, d_feat, zero=zero)

    def __call__(self, t_vec):
        return film_from_instruction(t_vec, self)


def film_from_instruction(t_vec, gen):
    t_vec = ag.as_tensor(t_vec)
    if t_vec.shape[-1] != gen.gamma.d_in:
        raise DimensionError(f"instruction width {t_vec.shape[-1]} != {gen.gamma.d_in}")
    return FilmParams(gen.gamma(t_vec), gen.beta(t_vec))


def film_modulate(h, fp):
    """``(1 + gamma) * h + beta`` broadcast over the row axis.

    ``h`` is ``[n, d]`` or ``[B, n, d]``; FiLM params are ``[d]`` or ``[B, d]``.
    """
    h = ag.as_tensor(h)
    d = h.shape[-1]
    if fp.scale.shape[-1] != d or fp.shift.shape[-1] != d:
        raise DimensionError(f"FiLM width {fp.scale.shape[-1]} vs feature width {d}")
    scale, shift = fp.scale, fp.shift
    if h.ndim == 3 and scale.ndim == 2:
        scale = ag.reshape(scale, (scale.shape[0], 1, d))
        shift = ag.reshape(shift, (shift.shape[0], 1, d))
    return (scale + 1.0) * h + shift


class EncoderBlock(Module):
    """One encoder layer: x + FFN(FiLM(Attn(LN(x)))).

    Without a FiLM generator the modulation step is skipped.
    """

    def __init__(self, rng, d, d_text, n_heads=1, ffn_mult=4, film=True):
        self.ln = LayerNorm(d)
        # a small query map starts aggregation close to uniform over patches while
        # full-scale keys keep its gradient from vanishing
        self.attn = MultiHeadAttention(rng, d, n_heads, q_std=0.01)
        self.ffn = MLP(rng, d, ffn_mult * d, d)
        self.ffn.fc2.weight.data *= 0.5
        self.film = FilmGenerator(rng, d_text, d) if film else None

    def __call__(self, x, t_vec=None, keep_weights=False, film=None):
        """``film`` supplies precomputed FiLM parameters (branch-shared mode)."""
        a = self.attn(self.ln(x), keep_weights=keep_weights)
        if film is None and self.film is not None:
            film = self.film(t_vec)
        if film is not None:
            a = film_modulate(a, film)
        return x + self.ffn(a)


def encoder_block(block, patches, agg, t_vec=None, keep_weights=False, film=None):
    """Run ``block`` over ``[patches; agg]`` and split the result back.

    Returns ``(patches, agg)``.  ``agg`` may be None (no aggregation slots).
    """
    patches = ag.as_tensor(patches)
    if agg is None:
        return block(patches, t_vec, keep_weights, film), None
    agg = ag.as_tensor(agg)
    p, g = patches.shape[-2], agg.shape[-2]
    if g > p:
        raise ContractError(f"{g} aggregation tokens exceed {p} patch tokens")
    x = block(ag.concat([patches, agg], axis=-2), t_vec, keep_weights, film)
    return x[..., :p, :], x[..., p:, :]


class EncoderBranch(Module):
    """A toy vision encoder: input projection, positions, blocks, output projection.

    With ``shared_film`` one FiLM generator serves every block of the branch;
    otherwise each block owns its own.
    """

    def __init__(self, rng, d_in, d, d_model, n_patches, n_agg, depth, n_heads=1,
                 ffn_mult=4, aggregate=True, d_text=None, shared_film=False):
        if depth < 1:
            raise ContractError("encoder depth must be at least 1")
        if aggregate and not 1 <= n_agg <= n_patches:
            raise ContractError(f"need 1 <= G <= P, got G={n_agg}, P={n_patches}")
        d_text = d_model if d_text is None else d_text
        self.inp = Linear(rng, d_in, d)
        self.pos = Parameter(rng.normal(0.0, 0.02, (n_patches, d)))
        self.agg_init = Parameter(rng.normal(0.0, 0.02, (n_agg, d))) if aggregate else None
        self.blocks = [EncoderBlock(rng, d, d_text, n_heads, ffn_mult,
                                    film=aggregate and not shared_film)
                       for _ in range(depth)]
        self.film = FilmGenerator(rng, d_text, d) if aggregate and shared_film else None
        self.out = Linear(rng, d, d_model)
        self.aggregate = aggregate

    def embed_patches(self, image):
        return self.inp(image) + self.pos

    def __call__(self, image, t_vec=None, keep_weights=False):
        return encode_branch(self, image, t_vec, keep_weights=keep_weights)


def encode_branch(branch, image, t_vec=None, depth=None, keep_weights=False):
    """Encode one branch; returns only the projected aggregation slots.

    With aggregation disabled the projected patch tokens are returned.
    """
    x = branch.embed_patches(ag.as_tensor(image))
    blocks = branch.blocks if depth is None else branch.blocks[:depth]
    if depth is not None and depth < 1:
        raise ContractError("depth must be at least 1")
    agg = None
    if branch.aggregate:
        agg = branch.agg_init
        if x.ndim == 3:
            agg = ag.add(ag.Tensor(np.zeros((x.shape[0], 1, 1))), agg)
    film = branch.film(t_vec) if branch.film is not None else None
    for blk in blocks:
        x, agg = encoder_block(blk, x, agg, t_vec, keep_weights, film)
    return branch.out(agg if branch.aggregate else x)


class CrossEncoderGate(Module):
    """alpha = sigmoid(W2 gelu(W1 t + b1) + b2), one weight per example."""

    def __init__(self, rng, d_text, hidden):
        self.mlp = MLP(rng, d_text, hidden, 1)
        self.mlp.fc2.weight.data *= 0.1

    def __call__(self, t_vec):
        return cross_encoder_gate(self, t_vec)


def cross_encoder_gate(gate, t_vec):
    t_vec = ag.as_tensor(t_vec)
    if t_vec.shape[-1] != gate.mlp.fc1.d_in:
        raise DimensionError(f"gate expects width {gate.mlp.fc1.d_in}, got {t_vec.shape[-1]}")
    return ag.sigmoid(gate.mlp(t_vec))


class SoftmaxRouter(Module):
    """N-branch routing weights: softmax(MLP(t))."""

    def __init__(self, rng, d_text, hidden, n_branches):
        if n_branches < 2:
            raise ContractError("softmax routing needs at least two branches")
        self.mlp = MLP(rng, d_text, hidden, n_branches)
        self.mlp.fc2.weight.data *= 0.1
        self.n = n_branches

    def __call__(self, t_vec):
        return route_weights_softmax(self, t_vec)


def route_weights_softmax(router, t_vec):
    if router.n < 2:
        raise ContractError("softmax routing needs at least two branches")
    return ag.softmax(router.mlp(ag.as_tensor(t_vec)), axis=-1)


def fuse_branches(a, b, alpha):
    """Convex combination ``alpha * a + (1 - alpha) * b`` of two slot sets.

    ``alpha`` is a scalar, a ``[B, 1]`` per-example weight, or a Tensor of either.
    """
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"branch shapes differ: {a.shape} vs {b.shape}")
    alpha = ag.as_tensor(alpha)
    if alpha.ndim == 2 and a.ndim == 3:
        alpha = ag.reshape(alpha, (alpha.shape[0], 1, 1))
    return alpha * a + (1.0 - alpha) * b


def fuse_many(branches, weights):
    """Weighted sum of N branch outputs with ``[B, N]`` softmax weights."""
    out = None
    for i, br in enumerate(branches):
        w = ag.reshape(weights[:, i], (weights.shape[0], 1, 1))
        term = w * br
        out = term if out is None else out + term
    return out
