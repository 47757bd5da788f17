"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np

from oracles import predicate
from vlaroute import autograd as ag
from vlaroute import checkpoint as ck
from vlaroute import coupled_attention as ca
from vlaroute import flops
from vlaroute import pruning as pr
from vlaroute import toyenv as te
from vlaroute import train as tr
from vlaroute.gradcheck import finite_difference_check
from vlaroute.layers import Module
from vlaroute.model import Model, ModelConfig, config_for_allocation

TOY = ModelConfig(d_model=32, d_enc=16, enc_depth=2, n_heads=2)
SEEDS = range(5)
STEPS, BATCH, LR, LOSS = 2000, 16, 1e-3, "mse"


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_01_schedule(report):
    with Timer() as t:
        s = pr.SparsitySchedule(32, 0.5)
        betas = s.betas()
        ok = (s.beta(16) == 0.5 and s.beta(32) == 0.05 and s.beta(1) == 0.85
              and 0.45 <= np.mean(betas) <= 0.55)
    ok = ok and t.seconds < 1
    report(1, "schedule reproduction", ok, t.seconds,
           f"beta1={s.beta(1):.3f} beta16={s.beta(16):.3f} beta32={s.beta(32):.3f} mean={np.mean(betas):.4f}")
    assert ok


def test_criterion_02_paper_flops_ratio(report):
    with Timer() as t:
        r = flops.paper_ratio()
    with_enc, without = r["with_encoders"], r["without_encoders"]
    ok = abs(with_enc / 3.12 - 1) <= 0.2 and abs(without / 3.12 - 1) <= 0.2 and t.seconds < 1
    report(2, "paper-scale FLOPs ratio", ok, t.seconds,
           f"with encoders {with_enc:.3f}, without {without:.3f}, band [2.496, 3.744]")
    assert ok


def _random_config(rng):
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    heads = int(rng.choice([1, 2]))
    return ModelConfig(
        d_model=heads * int(rng.integers(2, 6)), d_enc=heads * int(rng.integers(2, 5)),
        enc_depth=int(rng.integers(1, 3)), n_heads=heads, ffn_mult=int(rng.integers(1, 4)),
        L=int(rng.integers(1, 4)), grid_h=h, grid_w=w, d_in=int(rng.integers(1, 6)),
        n_agg=int(rng.integers(1, h * w + 1)), prune=bool(rng.integers(2)),
        eta=float(rng.uniform(-0.3, 0.8)), K=int(rng.integers(1, 4)), D=int(rng.integers(1, 4)),
        T=int(rng.integers(1, 5)), vocab=9, fusion=str(rng.choice(["sigmoid", "softmax"])),
        seed=int(rng.integers(1000)))


def test_criterion_03_ledger_exactness(report):
    rng = np.random.default_rng(7)
    mismatches = 0
    with Timer() as t:
        for _ in range(20):
            cfg = _random_config(rng)
            img = rng.normal(size=(1, cfg.n_patches, cfg.d_in))
            ids = rng.integers(1, cfg.vocab, (1, cfg.T))
            with ag.count_matmuls() as c:
                Model(cfg)(img, img, ids)
            mismatches += flops.count(cfg).total != 2 * c.macs
    ok = mismatches == 0 and t.seconds < 60
    report(3, "ledger exactness", ok, t.seconds, f"{mismatches}/20 mismatches")
    assert ok


def test_criterion_04_mask_oracle(report):
    with Timer() as t:
        bad = 0
        for M in range(1, 24):
            for T in range(1, 24 - M):
                for K in range(1, 24 - M - T):
                    for D in range(1, (24 - M - T) // K + 1):
                        S = M + T + K * D
                        q, k = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
                        expect = np.vectorize(lambda a, b: predicate(a, b, M, T))(q, k)
                        bad += not np.array_equal(ca.build_hybrid_mask(M, T, K, D).allow, expect)
        rng = np.random.default_rng(4)
        leak = 0.0
        for depth in (1, 2, 3, 4):
            M, T, K, D = 4, 3, 2, 2
            mask = ca.build_hybrid_mask(M, T, K, D)
            blocks = [ca.CAttenBlock(rng, 8, n_heads=2) for _ in range(depth)]
            x = rng.normal(size=(M + T + K * D, 8))
            y = x.copy()
            y[M + T:] = rng.normal(size=(K * D, 8))
            a, b = ag.as_tensor(x), ag.as_tensor(y)
            for blk in blocks:
                a, b = ca.catten_layer(blk, a, mask), ca.catten_layer(blk, b, mask)
            leak = max(leak, float(np.max(np.abs(a.data[:M + T] - b.data[:M + T]))))
    ok = bad == 0 and leak <= 1e-12 and t.seconds < 60
    report(4, "mask oracle", ok, t.seconds, f"{bad} mismatched masks, max VL leak {leak:.1e}")
    assert ok


class _Layer(Module):
    def __init__(self, rng, d):
        self.block = ca.CAttenBlock(rng, d, 1)
        self.film = pr.LLMFilm(rng, d, 6)
        self.router = pr.PruningRouter(rng, d, 6)


def test_criterion_05_pruning_contracts(report):
    rng = np.random.default_rng(5)
    layer = _Layer(rng, 4)
    failures = 0
    with Timer() as t:
        for _ in range(1000):
            m = int(rng.integers(1, 40))
            beta = float(rng.uniform(0.01, 1.0))
            z, txt = rng.normal(size=(1, m, 4)), rng.normal(size=(1, 2, 4))
            z_new, _, _, sel = pr.lfp_layer(layer, z, txt, beta)
            kept = sel.retained.reshape(-1)
            failures += kept.sum() != math.ceil(round(beta * m, 9))
            failures += not np.array_equal(z_new.data[0, ~kept], z[0, ~kept])
    ok = failures == 0 and t.seconds < 10
    report(5, "pruning contracts", ok, t.seconds, f"{failures} failures over 1000 draws")
    assert ok


def test_criterion_06_gradient_correctness(report):
    rng = np.random.default_rng(6)
    cfg = TOY
    model = Model(cfg)
    for p in model.parameters():
        p.data[...] += rng.normal(size=p.shape) * 0.05  # move off zero-initialised maps
    episodes = te.generate_dataset(te.TaskSpec(), 2, seed=11)
    img0, img1, ids, tgt = tr.build_samples(episodes, cfg.K).batch(np.array([0, 3]))
    tgt = tgt + rng.normal(size=tgt.shape) * 0.3

    def loss():
        return tr.chunk_loss(model(img0, img1, ids), tgt)

    with Timer() as t:
        err = finite_difference_check(loss, model.parameters(), step=1e-4, samples_per_param=2,
                                      rng=rng, order=4)
    ok = err < 1e-5 and t.seconds < 120
    report(6, "gradient correctness", ok, t.seconds, f"max relative error {err:.2e}")
    assert ok


def test_criterion_07_pass_counts(report):
    cfg0 = ModelConfig(d_model=8, d_enc=8, enc_depth=1, n_heads=2, L=2, grid_h=2, grid_w=2,
                       d_in=5, n_agg=2, T=3, vocab=15)
    rng = np.random.default_rng(7)
    counts = []
    with Timer() as t:
        for K, D in [(1, 1), (4, 1), (4, 2), (4, 3)]:
            cfg = cfg0.replace(K=K, D=D)
            model = Model(cfg)
            img = rng.normal(size=(1, 4, 5))
            ids = rng.integers(1, 15, (1, 3))
            model.passes = 0
            model(img, img, ids)
            parallel = model.passes
            _, t_r, t0, t_pad = model.instruction(ids)
            z0 = model.encode(img, img, t_r)
            model.passes = 0
            ca.ar_decode_reference(model.run_stack, model.head, model.placeholders, z0, t0, K, D, t_pad)
            counts.append((K * D, parallel, model.passes))
    ok = all(p == 1 and a == kd for kd, p, a in counts) and t.seconds < 10
    report(7, "pass counts", ok, t.seconds, " ".join(f"KD={kd}:{p}/{a}" for kd, p, a in counts))
    assert ok


def test_criterion_10_persistence(report, tmp_path):
    with Timer() as t:
        cfg = TOY
        model = Model(cfg)
        rng = np.random.default_rng(10)
        for p in model.parameters():
            p.data[...] += rng.normal(size=p.shape) * 0.01
        episodes = te.generate_dataset(te.TaskSpec(), 20, seed=10)
        img0, img1, ids, _ = tr.build_samples(episodes, cfg.K).batch(np.arange(4))
        before = model(img0, img1, ids).data
        ck.save_checkpoint(model, tmp_path / "m.ckpt", step=3)
        loaded, _ = ck.model_from_checkpoint(tmp_path / "m.ckpt")
        same_forward = loaded(img0, img1, ids).data.tobytes() == before.tobytes()
        same_ckpt = ck.checkpoint_bytes(loaded, 3) == (tmp_path / "m.ckpt").read_bytes()
        te.write_dataset(episodes, tmp_path / "d.bin")
        same_data = te.dataset_bytes(te.read_dataset(tmp_path / "d.bin")) == (tmp_path / "d.bin").read_bytes()
    ok = same_forward and same_ckpt and same_data and t.seconds < 10
    report(10, "persistence", ok, t.seconds,
           f"forward={same_forward} checkpoint={same_ckpt} dataset={same_data}")
    assert ok


_RUNS = {}


def _learning_run(stage1, stage2, seed):
    """Train one allocation on 1000 episodes and return held-out success."""
    key = (stage1, stage2, seed)
    if key not in _RUNS:
        spec = te.TaskSpec()
        train_eps = te.generate_dataset(spec, 1000, seed)
        heldout = te.generate_dataset(spec, 200, 1000 + seed)
        cfg = config_for_allocation(TOY.replace(seed=seed), stage1, stage2)
        model = Model(cfg)
        start = time.perf_counter()
        tr.train(model, tr.build_samples(train_eps, cfg.K, cfg.D), STEPS, BATCH, LR, seed,
                 loss_kind=LOSS)
        success = tr.evaluate(heldout, tr.model_policy(model), cfg.K, cfg.D)["success"]
        _RUNS[key] = success
        print(f"  {stage1}x{stage2} seed {seed}: success {success:.3f} "
              f"({time.perf_counter() - start:.0f}s)", flush=True)
    return _RUNS[key]


def test_criterion_08_end_to_end_learning(report):
    with Timer() as t:
        sparse_cfg = config_for_allocation(TOY, 4, 2)
        llm_ratio = flops.count_dense(sparse_cfg).llm / flops.count_sparse(sparse_cfg).llm
        rows = [(_learning_run(4, 2, s), _learning_run(1, 1, s)) for s in SEEDS]
    good = sum(sp >= 0.6 and sp >= 0.8 * de for sp, de in rows)
    ok = good >= 4 and llm_ratio >= 2.5 and t.seconds < 15 * 60
    detail = " ".join(f"{sp:.2f}/{de:.2f}" for sp, de in rows)
    report(8, "end-to-end learning", ok, t.seconds,
           f"sparse/dense success per seed {detail}; {good}/5 seeds pass; LLM ratio {llm_ratio:.2f}")
    assert ok


def test_criterion_09_ablation_ordering(report):
    with Timer() as t:
        rows = [(_learning_run(4, 2, s), _learning_run(1, 8, s)) for s in SEEDS]
    wins = sum(a > b for a, b in rows)
    ok = wins >= 4 and t.seconds < 3600
    detail = " ".join(f"{a:.2f}/{b:.2f}" for a, b in rows)
    report(9, "ablation ordering", ok, t.seconds, f"4x2 vs 1x8 success per seed {detail}; {wins}/5 wins")
    assert ok
