"""Instruction-conditioned token pruning inside the language stack.

At each layer the visual rows are FiLM-modulated by the pooled instruction,
scored by a small router MLP, and only the top ``ceil(beta_l * M)`` rows take
part in that layer's attention and feed-forward.  Their update is scaled by
the raw router score.  Every other visual row is carried over unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DimensionError
from .layers import MLP, Module


@dataclass(frozen=True)
class SparsitySchedule:
    """Clamped shifted-cosine retention schedule over ``L`` layers."""

    L: int
    eta: float = 0.5
    clamp_lo: float = 0.05
    clamp_hi: float = 0.85

    def __post_init__(self):
        if self.L < 1:
            raise ContractError("schedule needs at least one layer")
        if not 0.0 <= self.clamp_lo < self.clamp_hi <= 1.0:
            raise ContractError(f"bad clamp range [{self.clamp_lo}, {self.clamp_hi}]")

    def beta(self, l):
        return schedule_beta(l, self)

    def betas(self):
        return [schedule_beta(l, self) for l in range(1, self.L + 1)]

    def mean(self):
        return float(np.mean(self.betas()))


def schedule_beta(l, sched):
    """Retention ratio of layer ``l`` (1-based)."""
    if not 1 <= l <= sched.L:
        raise ContractError(f"layer {l} outside 1..{sched.L}")
    raw = 0.5 * math.cos(math.pi * l / sched.L) + sched.eta
    return min(max(raw, sched.clamp_lo), sched.clamp_hi)


def solve_eta(L, target_mean, clamp_lo=0.05, clamp_hi=0.85, tol=1e-12):
    """Find the shift giving a schedule whose mean retention is ``target_mean``.

    Returns ``(eta, feasible)``.  The mean is monotone in eta and saturates at
    the clamp bounds; an unreachable target yields the nearest bound's eta and
    ``feasible=False``.
    """
    def mean_at(eta):
        return SparsitySchedule(L, eta, clamp_lo, clamp_hi).mean()

    lo, hi = clamp_lo - 0.5 - 1.0, clamp_hi + 0.5 + 1.0
    if target_mean <= mean_at(lo):
        return lo, math.isclose(target_mean, mean_at(lo), rel_tol=1e-9)
    if target_mean >= mean_at(hi):
        return hi, math.isclose(target_mean, mean_at(hi), rel_tol=1e-9)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_at(mid) < target_mean:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi), True


def retention_count(beta, m):
    if not 0.0 < beta <= 1.0:
        raise ContractError(f"retention ratio {beta} outside (0, 1]")
    # round away float noise such as 0.15 * 20 = 3.0000000000000004
    return min(m, max(1, math.ceil(round(beta * m, 9))))


def kept_count(beta, m, literal=False):
    """Rows that take part in a layer: ``ceil(beta * m)``, or the complement
    (at least one) when the ratio is read as a percentile."""
    if literal:
        return max(1, m - retention_count(beta, m))
    return retention_count(beta, m)


@dataclass
class RetentionMask:
    retained: np.ndarray  # bool, [M] or [B, M]
    threshold: np.ndarray  # float, [] or [B]
    indices: np.ndarray  # int, retained positions in ascending order


def percentile_threshold(scores, beta, literal=False):
    """Keep the ``ceil(beta * M)`` highest scores; ties go to lower indices.

    The threshold is the midpoint between the lowest kept score and the
    highest dropped one, i.e. an empirical ``(1 - beta)``-quantile.  With
    ``literal=True`` the ratio is read as the percentile itself, so about
    ``1 - beta`` of the tokens are kept.
    """
    s = np.asarray(scores, dtype=float)
    single = s.ndim == 1
    if single:
        s = s[None]
    m = s.shape[-1]
    if m == 0:
        raise ContractError("no scores to threshold")
    keep = kept_count(beta, m, literal)
    order = np.argsort(-s, axis=-1, kind="stable")
    idx = np.sort(order[:, :keep], axis=-1)
    retained = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(retained, idx, True, axis=-1)
    lowest_kept = np.take_along_axis(s, order[:, keep - 1:keep], axis=-1)[:, 0]
    if keep < m:
        highest_dropped = np.take_along_axis(s, order[:, keep:keep + 1], axis=-1)[:, 0]
        threshold = 0.5 * (lowest_kept + highest_dropped)
    else:
        threshold = np.full(s.shape[0], -np.inf)
    if single:
        return RetentionMask(retained[0], threshold[0], idx[0])
    return RetentionMask(retained, threshold, idx)


class LLMFilm(Module):
    """Scale and shift from two-layer GeLU MLPs over the pooled instruction."""

    def __init__(self, rng, d, hidden):
        self.gamma = MLP(rng, d, hidden, d, zero_out=True)
        self.beta = MLP(rng, d, hidden, d, zero_out=True)

    def __call__(self, z, t_vec):
        return llm_film(self, z, t_vec)


def llm_film(film, z, t_vec):
    z, t_vec = ag.as_tensor(z), ag.as_tensor(t_vec)
    d = z.shape[-1]
    if t_vec.shape[-1] != film.gamma.fc1.d_in:
        raise DimensionError(f"instruction width {t_vec.shape[-1]} != {film.gamma.fc1.d_in}")
    g, b = film.gamma(t_vec), film.beta(t_vec)
    if g.shape[-1] != d:
        raise DimensionError(f"FiLM width {g.shape[-1]} vs token width {d}")
    if z.ndim == 3:
        g = ag.reshape(g, (z.shape[0], 1, d))
        b = ag.reshape(b, (z.shape[0], 1, d))
    return (g + 1.0) * z + b


class PruningRouter(Module):
    """Per-token relevance score from a two-layer MLP (no squashing)."""

    def __init__(self, rng, d, hidden):
        self.mlp = MLP(rng, d, hidden, 1)

    def __call__(self, z):
        return routing_scores(self, z)


def routing_scores(router, z):
    z = ag.as_tensor(z)
    if z.shape[-2] < 1:
        raise ContractError("need at least one visual token to score")
    out = router.mlp(z)
    return ag.reshape(out, out.shape[:-1])


def lfp_layer(layer, z, t, beta, t_vec=None, actions=None, t_pad=None, literal=False,
              action_causal=False):
    """One pruned language layer over visual rows ``z`` and instruction rows ``t``.

    ``layer`` provides ``film``, ``router`` and ``block`` (a coupled-attention
    block exposing ``delta(x, mask)``).  ``actions`` are optional action rows
    appended after the instruction.  Returns ``(z, t, actions, mask_info)``.
    """
    from .coupled_attention import hybrid_additive, key_padding

    z, t = ag.as_tensor(z), ag.as_tensor(t)
    batched = z.ndim == 3
    if not batched:
        z, t = ag.reshape(z, (1,) + z.shape), ag.reshape(t, (1,) + t.shape)
        if actions is not None:
            actions = ag.reshape(actions, (1,) + actions.shape)
        if t_vec is not None:
            t_vec = ag.reshape(t_vec, (1,) + t_vec.shape)
        if t_pad is not None:
            t_pad = np.asarray(t_pad)[None]
    if z.shape[-1] != t.shape[-1]:
        raise DimensionError("visual and instruction widths differ")
    if t_vec is None:
        from .aggregation import pool_instruction
        t_vec = pool_instruction(t, t_pad)
    zf = layer.film(z, t_vec)
    scores = routing_scores(layer.router, zf)
    sel = percentile_threshold(scores.data, beta, literal=literal)
    idx = sel.indices
    r = idx.shape[-1]
    n_act = 0 if actions is None else actions.shape[1]
    parts = [ag.gather_rows(zf, idx), t] + ([] if actions is None else [actions])
    x = ag.concat(parts, axis=1)
    T = t.shape[1]
    mask = hybrid_additive(r, T, n_act, action_causal)[None] + key_padding(t_pad, r, n_act, x.shape[0])
    delta = layer.block.delta(x, mask)
    r_sel = ag.gather_rows(ag.reshape(scores, scores.shape + (1,)), idx)
    z_new = ag.scatter_add_rows(z, idx, r_sel * delta[:, :r, :])
    t_new = t + delta[:, r:r + T, :]
    a_new = None if actions is None else actions + delta[:, r + T:, :]
    if not batched:
        z_new, t_new = z_new[0], t_new[0]
        a_new = None if a_new is None else a_new[0]
    return z_new, t_new, a_new, sel
