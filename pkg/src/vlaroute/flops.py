"""Analytic FLOPs ledger.

Every count is built from the matmuls the model actually issues, one
multiply-accumulate being two FLOPs.  Softmax, normalisation, activations,
gathers and elementwise work are not counted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .model import ConfigError, ModelConfig, config_for_allocation
from .pruning import SparsitySchedule, kept_count, solve_eta

STAGES = ("vision", "llm_attention", "llm_ffn", "routing", "head")


@dataclass
class FlopsReport:
    vision: int = 0
    llm_attention: int = 0
    llm_ffn: int = 0
    routing: int = 0  # encoder FiLM, branch gate, LLM FiLM and routers
    llm_routing: int = 0  # the part of ``routing`` spent inside the language stack
    head: int = 0
    assumptions: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.vision + self.llm_attention + self.llm_ffn + self.routing + self.head

    @property
    def total_without_vision(self):
        return self.total - self.vision - (self.routing - self.llm_routing)

    @property
    def llm(self):
        return self.llm_attention + self.llm_ffn + self.llm_routing

    def macs(self):
        return self.total // 2

    def as_dict(self):
        out = {s: getattr(self, s) for s in STAGES}
        out["total"] = self.total
        return out


@dataclass(frozen=True)
class StageBreakdown:
    stage1: float
    stage2: float

    @property
    def product(self):
        return self.stage1 * self.stage2


def _attn_macs(s, d):
    # q, k, v, o projections plus score and value products over all heads
    return 4 * s * d * d + 2 * s * s * d


def _ffn_macs(s, d, mult):
    return 2 * s * d * mult * d


def _mlp_macs(rows, d_in, hidden, d_out):
    return rows * (d_in * hidden + hidden * d_out)


def _llm_macs(cfg, n_act):
    """(attention, ffn, routing) MACs of one stack pass with ``n_act`` action rows."""
    G, d = cfg.n_visual, cfg.d_model
    attn = ffn = routing = 0
    for beta in cfg.betas():
        r = kept_count(beta, G, cfg.retention == "literal") if cfg.prune else G
        s = r + cfg.T + n_act
        attn += _attn_macs(s, d)
        ffn += _ffn_macs(s, d, cfg.ffn_mult)
        if cfg.prune:
            routing += 2 * _mlp_macs(1, d, cfg.hidden("film_hidden"), d)
            routing += _mlp_macs(G, d, cfg.hidden("router_hidden"), 1)
    return attn, ffn, routing


def count(cfg, batch=1):
    """FLOPs of one parallel-decoding forward pass of ``cfg`` on ``batch`` examples."""
    cfg.validate()
    P, G, de, d = cfg.n_patches, cfg.n_visual, cfg.d_enc, cfg.d_model
    rep = FlopsReport()
    vision = routing = 0

    seq = P + G if cfg.aggregate else P
    per_branch = P * cfg.d_in * de
    per_branch += cfg.enc_depth * (_attn_macs(seq, de) + _ffn_macs(seq, de, cfg.ffn_mult))
    per_branch += G * de * d
    vision = 2 * per_branch
    if cfg.aggregate:
        films = 1 if cfg.film_sharing == "shared" else cfg.enc_depth
        routing += 2 * films * 2 * d * de  # FiLM scale and shift maps, both branches
        n_out = 1 if cfg.fusion == "sigmoid" else 2
        routing += _mlp_macs(1, d, cfg.hidden("gate_hidden"), n_out)

    n_act = cfg.K * cfg.D
    attn, ffn, llm_routing = _llm_macs(cfg, n_act)
    routing += llm_routing

    head = n_act * d
    b2 = 2 * batch
    rep.vision, rep.llm_attention, rep.llm_ffn = b2 * vision, b2 * attn, b2 * ffn
    rep.routing, rep.llm_routing, rep.head = b2 * routing, b2 * llm_routing, b2 * head
    return rep


def dense_config(cfg):
    """Same backbone with both sparsification stages switched off."""
    return cfg.replace(n_agg=cfg.n_patches, prune=False)


def count_dense(cfg, batch=1):
    return count(dense_config(cfg), batch)


def count_sparse(cfg, batch=1):
    return count(cfg, batch)


def ar_passes(cfg):
    return cfg.K * cfg.D


def count_ar(cfg, batch=1):
    """FLOPs of the coordinate-by-coordinate reference decoder.

    The visual context is encoded once; pass ``i`` runs the full stack over
    ``i + 1`` action rows and reads one coordinate.
    """
    rep = count(cfg, batch)
    attn = ffn = routing = 0
    for i in range(ar_passes(cfg)):
        a, f, r = _llm_macs(cfg, i + 1)
        attn, ffn, routing = attn + a, ffn + f, routing + r
    b2 = 2 * batch
    rep.routing += b2 * routing - rep.llm_routing
    rep.llm_attention, rep.llm_ffn, rep.llm_routing = b2 * attn, b2 * ffn, b2 * routing
    rep.head = b2 * ar_passes(cfg) * cfg.d_model
    return rep


def breakdown(cfg):
    return StageBreakdown(cfg.stage1_factor, cfg.stage2_factor)


# ------------------------------------------------------------- paper scale

PAPER_ASSUMPTIONS = {
    "hidden width": "4096 (7B-class backbone)",
    "ffn multiplier": "4 (two linear maps)",
    "patches per branch": "256 (16x16 grid)",
    "encoder width/depth": "1024 / 24 for both branches",
    "instruction tokens": "32",
    "routing hidden widths": "2048 for router, FiLM and gate MLPs",
}


def paper_config(eta=0.5):
    return ModelConfig(d_model=4096, d_enc=1024, enc_depth=24, n_heads=32, ffn_mult=4, L=32,
                       grid_h=16, grid_w=16, d_in=1024, n_agg=64, prune=True, eta=eta,
                       K=8, D=7, T=32, vocab=32000, film_hidden=2048, router_hidden=2048,
                       gate_hidden=2048)


def paper_ratio():
    """Dense/sparse FLOPs ratio at paper scale, with and without encoder cost."""
    cfg = paper_config()
    dense, sparse = count_dense(cfg), count_sparse(cfg)
    dense.assumptions = sparse.assumptions = dict(PAPER_ASSUMPTIONS)
    return {
        "with_encoders": dense.total / sparse.total,
        "without_encoders": dense.total_without_vision / sparse.total_without_vision,
        "dense": dense,
        "sparse": sparse,
    }


# ------------------------------------------------------------------ ablation


@dataclass
class AllocationRow:
    stage1: float
    stage2: float
    product: float
    feasible: bool
    achieved_stage2: float
    eta: float
    report: FlopsReport
    config: ModelConfig
    note: str = ""


def allocation(base, stage1, stage2):
    """Config for one grid cell.

    The shift is solved so ``1 / mean(beta)`` hits ``stage2``.  Unreachable
    targets (for example 1x, since betas clamp at ``clamp_hi``) keep the
    nearest feasible schedule and are flagged.
    """
    if stage1 < 1 or stage2 < 1:
        raise ConfigError("allocation factors must be >= 1")
    eta, feasible = solve_eta(base.L, 1.0 / stage2, base.clamp_lo, base.clamp_hi)
    cfg = config_for_allocation(base, stage1, 2).replace(prune=True, eta=eta)
    achieved = 1.0 / SparsitySchedule(base.L, eta, base.clamp_lo, base.clamp_hi).mean()
    if feasible and abs(achieved - stage2) > 0.01 * stage2:
        feasible = False
    return cfg, feasible, eta, achieved


def ablation_grid(base, cells):
    rows = []
    for s1, s2 in cells:
        cfg, feasible, eta, achieved = allocation(base, s1, s2)
        note = "" if feasible else f"infeasible: nearest mean beta {1.0 / achieved:.4f}"
        rows.append(AllocationRow(s1, s2, s1 * s2, feasible, achieved, eta, count(cfg), cfg, note))
    return rows


def parse_grid(text):
    """``"4x2,1x8"`` (``x`` or the multiplication sign) -> ``[(4, 2), (1, 8)]``."""
    cells = []
    for item in text.split(","):
        item = item.strip().replace("×", "x").lower()
        if not item:
            continue
        try:
            a, b = item.split("x")
            cells.append((int(a), int(b)))
        except ValueError as exc:
            raise ConfigError(f"bad grid cell {item!r}") from exc
    if not cells:
        raise ConfigError("empty allocation grid")
    return cells


# ------------------------------------------------------------------- output


def format_table(reports):
    """Aligned plain-text table; ``reports`` maps a label to a FlopsReport."""
    cols = STAGES + ("total",)
    label_w = max(len("config"), *(len(k) for k in reports))
    widths = {c: max(len(c), *(len(f"{r.as_dict()[c]:,}") for r in reports.values())) for c in cols}
    lines = ["config".ljust(label_w) + "  " + "  ".join(c.rjust(widths[c]) for c in cols)]
    for label, rep in reports.items():
        vals = rep.as_dict()
        lines.append(label.ljust(label_w) + "  " +
                     "  ".join(f"{vals[c]:,}".rjust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def format_records(reports):
    """One ``key=value`` group per label and stage, blank-line separated."""
    groups = []
    for label, rep in reports.items():
        for stage, value in rep.as_dict().items():
            groups.append(f"config={label}\nstage={stage}\nflops={value}\n")
    return "\n".join(groups)


def header(assumptions):
    return "".join(f"# assumption: {k} = {v}\n" for k, v in assumptions.items())


def ratio(a, b):
    return a / b if b else math.inf
