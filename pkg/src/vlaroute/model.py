"""End-to-end model: two aggregating encoders, a pruned language stack with
coupled attention, and a parallel action-chunk head."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .aggregation import (CrossEncoderGate, EncoderBranch, SoftmaxRouter, fuse_branches,
                          fuse_many, pool_instruction)
from .autograd import Parameter
from .coupled_attention import (ActionHead, ActionPlaceholders, CAttenBlock, hybrid_additive,
                                key_padding, parallel_decode)
from .layers import Module
from .pruning import LLMFilm, PruningRouter, SparsitySchedule, lfp_layer, retention_count


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_enc: int = 64
    enc_depth: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    L: int = 4
    grid_h: int = 8
    grid_w: int = 8
    d_in: int = 48
    n_agg: int = 16
    prune: bool = True
    eta: float = 0.5
    clamp_lo: float = 0.05
    clamp_hi: float = 0.85
    K: int = 4
    D: int = 3
    T: int = 6
    vocab: int = 15
    film_hidden: int = 0  # 0 means 4 * d_model
    router_hidden: int = 0  # 0 means d_model
    gate_hidden: int = 0  # 0 means d_model
    fusion: str = "sigmoid"
    retention: str = "ratio"
    film_sharing: str = "block"  # encoder FiLM per block or one per branch
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_patches(self):
        return self.grid_h * self.grid_w

    @property
    def aggregate(self):
        return self.n_agg < self.n_patches

    @property
    def n_visual(self):
        return self.n_agg if self.aggregate else self.n_patches

    @property
    def stage1_factor(self):
        """Visual-token reduction relative to the dense, per-patch-fused baseline."""
        return self.n_patches / self.n_visual

    @property
    def stage1_token_reduction(self):
        """Patch tokens across both branches per token handed to the language stack."""
        return 2 * self.n_patches / self.n_visual

    @property
    def schedule(self):
        return SparsitySchedule(self.L, self.eta, self.clamp_lo, self.clamp_hi) if self.prune else None

    def betas(self):
        return self.schedule.betas() if self.prune else [1.0] * self.L

    @property
    def stage2_factor(self):
        return 1.0 / float(np.mean(self.betas()))

    @property
    def total_sparsification(self):
        return self.stage1_factor * self.stage2_factor

    def hidden(self, name):
        val = getattr(self, name)
        return val if val else (4 * self.d_model if name == "film_hidden" else self.d_model)

    def validate(self):
        pos = ["d_model", "d_enc", "enc_depth", "n_heads", "ffn_mult", "L", "grid_h", "grid_w",
               "d_in", "n_agg", "K", "D", "T", "vocab"]
        for name in pos:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_agg > self.n_patches:
            raise ConfigError(f"n_agg={self.n_agg} exceeds {self.n_patches} patches")
        if self.d_model % self.n_heads or self.d_enc % self.n_heads:
            raise ConfigError("widths must be divisible by n_heads")
        if self.d_model < 2 or self.d_enc < 2:
            raise ConfigError("widths must be at least 2 for layer norm")
        if not 0.0 <= self.clamp_lo < self.clamp_hi <= 1.0:
            raise ConfigError("need 0 <= clamp_lo < clamp_hi <= 1")
        if self.fusion not in ("sigmoid", "softmax"):
            raise ConfigError("fusion must be 'sigmoid' or 'softmax'")
        if self.retention not in ("ratio", "literal"):
            raise ConfigError("retention must be 'ratio' or 'literal'")
        if self.film_sharing not in ("block", "shared"):
            raise ConfigError("film_sharing must be 'block' or 'shared'")

    # -- text form: flat key=value lines, '#' comments

    def to_text(self):
        items = sorted(dataclasses.asdict(self).items())
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items)

    @classmethod
    def from_text(cls, text, **overrides):
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(val, dataclasses.fields(cls)[list(fields).index(key)].default)
        values.update(overrides)
        return cls(**values)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text, default):
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"bad boolean {text!r}")
        return text.lower() in ("true", "1")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return text


def config_for_allocation(base, stage1, stage2):
    """Copy of ``base`` with a Stage-1 factor and a Stage-2 target factor.

    Stage 2 of 1x disables pruning.  Otherwise the shift is solved so the mean
    clamped retention equals ``1 / stage2`` (nearest feasible if unreachable).
    """
    from .pruning import solve_eta

    P = base.n_patches
    if P % stage1:
        raise ConfigError(f"stage-1 factor {stage1} does not divide {P} patches")
    cfg = base.replace(n_agg=P // stage1)
    if stage2 == 1:
        return cfg.replace(prune=False)
    eta, _ = solve_eta(base.L, 1.0 / stage2, base.clamp_lo, base.clamp_hi)
    return cfg.replace(prune=True, eta=eta)


class LanguageLayer(Module):
    def __init__(self, rng, cfg):
        d = cfg.d_model
        self.block = CAttenBlock(rng, d, cfg.n_heads, cfg.ffn_mult)
        self.film = LLMFilm(rng, d, cfg.hidden("film_hidden")) if cfg.prune else None
        self.router = PruningRouter(rng, d, cfg.hidden("router_hidden")) if cfg.prune else None


class Model(Module):
    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.embed = Parameter(rng.normal(0.0, 1.0, (cfg.vocab, d)))
        self.instr_pos = Parameter(rng.normal(0.0, 0.02, (cfg.T, d)))
        self.branches = [
            EncoderBranch(rng, cfg.d_in, cfg.d_enc, d, cfg.n_patches, cfg.n_agg, cfg.enc_depth,
                          cfg.n_heads, cfg.ffn_mult, aggregate=cfg.aggregate, d_text=d,
                          shared_film=cfg.film_sharing == "shared")
            for _ in range(2)
        ]
        self.gate = None
        if cfg.aggregate:
            if cfg.fusion == "sigmoid":
                self.gate = CrossEncoderGate(rng, d, cfg.hidden("gate_hidden"))
            else:
                self.gate = SoftmaxRouter(rng, d, cfg.hidden("gate_hidden"), 2)
        self.layers = [LanguageLayer(rng, cfg) for _ in range(cfg.L)]
        self.placeholders = ActionPlaceholders(rng, cfg.K * cfg.D, d)
        self.head = ActionHead(rng, d, squash_gripper=cfg.D == 7)
        self.assign_names()
        self.passes = 0
        self.last_retained = []
        self.last_alpha = None

    # ---------------------------------------------------------------- stages

    def instruction(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.cfg.T:
            raise ConfigError(f"instruction length {ids.shape[1]} != T={self.cfg.T}")
        pad = ids == 0
        tok = ag.embedding(self.embed, ids)
        t_pad = pad if pad.any() else None
        return tok, pool_instruction(tok, t_pad), tok + self.instr_pos, t_pad

    def encode(self, img0, img1, t_r, keep_weights=False):
        v0 = self.branches[0](img0, t_r, keep_weights)
        v1 = self.branches[1](img1, t_r, keep_weights)
        if self.gate is None:
            self.last_alpha = None
            return fuse_branches(v0, v1, 0.5)
        if self.cfg.fusion == "sigmoid":
            alpha = self.gate(t_r)
            self.last_alpha = alpha.data
            return fuse_branches(v0, v1, alpha)
        w = self.gate(t_r)
        self.last_alpha = w.data
        return fuse_many([v0, v1], w)

    def run_stack(self, z, t, acts, t_pad=None, action_causal=False):
        """All language layers over ``[visual; instruction; action]`` rows."""
        self.passes += 1
        cfg = self.cfg
        retained = []
        betas = cfg.betas()
        n_act = acts.shape[1]
        for l, layer in enumerate(self.layers):
            if layer.router is not None:
                z, t, acts, sel = lfp_layer(layer, z, t, betas[l], actions=acts, t_pad=t_pad,
                                            literal=cfg.retention == "literal",
                                            action_causal=action_causal)
                retained.append(sel.indices.shape[-1])
            else:
                m, T = z.shape[1], t.shape[1]
                x = ag.concat([z, t, acts], axis=1)
                mask = hybrid_additive(m, T, n_act, action_causal)[None] + key_padding(
                    t_pad, m, n_act, x.shape[0])
                x = x + layer.block.delta(x, mask)
                z, t, acts = x[:, :m], x[:, m:m + T], x[:, m + T:]
                retained.append(m)
        self.last_retained = retained
        return z, t, acts

    def forward(self, img0, img1, ids, keep_weights=False):
        """Predict ``[B, K, D]`` action chunks from two branch renderings and ids."""
        img0 = np.asarray(img0, dtype=float)
        img1 = np.asarray(img1, dtype=float)
        if img0.ndim == 2:
            img0, img1 = img0[None], img1[None]
        cfg = self.cfg
        if img0.shape[1:] != (cfg.n_patches, cfg.d_in) or img1.shape != img0.shape:
            raise ConfigError(f"expected renderings of shape [B, {cfg.n_patches}, {cfg.d_in}]")
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
            raise ConfigError(f"token ids must lie in [0, {cfg.vocab})")
        _, t_r, t0, t_pad = self.instruction(ids)
        z0 = self.encode(img0, img1, t_r, keep_weights)
        return parallel_decode(self.run_stack, self.head, self.placeholders, z0, t0,
                               cfg.K, cfg.D, t_pad)

    __call__ = forward

    def expected_retained(self):
        cfg = self.cfg
        return [retention_count(b, cfg.n_visual) for b in cfg.betas()]


def build_model(cfg):
    return Model(cfg)


def mean_retained(cfg):
    return float(np.mean([retention_count(b, cfg.n_visual) for b in cfg.betas()]))


def sparsification_report(cfg):
    """Stage factors and the effective visual-token reduction."""
    counts = [retention_count(b, cfg.n_visual) for b in cfg.betas()]
    effective = cfg.n_patches / float(np.mean(counts))
    return {
        "stage1": cfg.stage1_factor,
        "stage2": cfg.stage2_factor,
        "total": cfg.total_sparsification,
        "effective": effective,
        "retained_counts": counts,
        "ceil_ok": all(c == math.ceil(round(b * cfg.n_visual, 9)) for c, b in zip(counts, cfg.betas())),
    }
