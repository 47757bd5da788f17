"""Training loop, closed-loop evaluation and sample batching for the toy task."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import toyenv as te
from .autograd import Tape, backward


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    """Adam moments keyed by parameter name, plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model, lr=3e-4):
        state = cls(lr=lr)
        for name, p in model.named_parameters():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_update(model, state):
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in model.named_parameters():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr:
            p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class SampleSet:
    """Expert (state, instruction) -> next-chunk pairs with branch projections."""

    descriptors: tuple  # per branch, [N, P, F_b] uint8
    instructions: np.ndarray  # [N, T]
    targets: np.ndarray  # [N, K, D]
    projections: tuple  # two [F, render_dim] arrays

    def __len__(self):
        return len(self.targets)

    def batch(self, idx):
        d0, d1 = (d[idx].astype(float) for d in self.descriptors)
        return (d0 @ self.projections[0], d1 @ self.projections[1],
                self.instructions[idx], self.targets[idx])


def build_samples(episodes, K, action_dim=3):
    if not episodes:
        raise ValueError("empty dataset")
    seeds = {ep.scene.render_seed for ep in episodes}
    if len(seeds) != 1:
        raise ValueError("episodes use different render projections")
    scene = episodes[0].scene
    proj = tuple(te.projection(scene.render_seed, b, scene.render_dim) for b in (0, 1))
    d0, d1, instr, targets = te.expert_samples(episodes, K, action_dim)
    return SampleSet((d0, d1), instr, targets, proj)


LOSSES = ("l1", "mse")


def chunk_loss(pred, target, kind="l1"):
    """Mean absolute (``l1``) or squared (``mse``) error over batch, chunk steps
    and action coordinates."""
    diff = pred - target
    if kind == "l1":
        return ag.tmean(ag.tabs(diff))
    if kind == "mse":
        return ag.tmean(diff * diff)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def train_step(model, batch, state, loss_kind="l1"):
    """One Adam step on an ``(img0, img1, ids, target)`` batch; returns the loss."""
    img0, img1, ids, target = batch
    if len(target) == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    with Tape() as tape:
        loss = chunk_loss(model(img0, img1, ids), np.asarray(target, dtype=float), loss_kind)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step}")
    backward(tape, loss)
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {name} at step {state.step}")
    adam_update(model, state)
    return value


def train(model, samples, steps, batch_size=16, lr=3e-4, seed=0, state=None, log=None,
          loss_kind="l1"):
    """Run ``steps`` minibatch steps; ``log(step, loss, retained_mean)`` is called
    for step 0 (loss before any update) and after every step."""
    rng = np.random.default_rng(seed)
    state = TrainState.for_model(model, lr) if state is None else state
    n = len(samples)
    losses = []
    for i in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        if i == 0 and log is not None:
            log(0, evaluate_loss(model, samples.batch(idx), loss_kind), _retained_mean(model))
        losses.append(train_step(model, samples.batch(idx), state, loss_kind))
        if log is not None:
            log(i + 1, losses[-1], _retained_mean(model))
    return state, losses


def evaluate_loss(model, batch, loss_kind="l1"):
    img0, img1, ids, target = batch
    return float(chunk_loss(model(img0, img1, ids), np.asarray(target, dtype=float), loss_kind).data)


def _retained_mean(model):
    return float(np.mean(model.last_retained)) if model.last_retained else float("nan")


# ---------------------------------------------------------------- policies


def model_policy(model, batch_size=64):
    """Wrap a model as ``policy(img0, img1, ids) -> [B, K, D]`` numpy chunks."""
    def policy(img0, img1, ids):
        outs = []
        for s in range(0, len(ids), batch_size):
            sl = slice(s, s + batch_size)
            outs.append(model(img0[sl], img1[sl], ids[sl]).data)
        return np.concatenate(outs)
    return policy


def random_policy(K, D, seed=0):
    rng = np.random.default_rng(seed)

    def policy(img0, img1, ids):
        chunk = rng.uniform(-1.0, 1.0, (len(ids), K, D))
        chunk[:, :, D - 1] = rng.uniform(0.0, 1.0, (len(ids), K))
        return chunk
    return policy


def zero_policy(K, D):
    return lambda img0, img1, ids: np.zeros((len(ids), K, D))


def oracle_policy(episodes, K, action_dim=3):
    """Expert chunks looked up from the live state; only valid inside ``rollout``."""
    def policy(img0, img1, ids, states=None, scenes=None):
        return np.stack([te.expert_chunk(sc, st, K, action_dim) for sc, st in zip(scenes, states)])
    policy.needs_state = True
    return policy


def rollout(episodes, policy, K, D, extra_chunks=1):
    """Closed-loop execution; returns a boolean success array.

    Each episode gets ``ceil(expert_length / K) + extra_chunks`` chunks.  All
    unsolved episodes are queried together once per chunk.
    """
    if not episodes:
        raise ValueError("empty dataset")
    scene0 = episodes[0].scene
    proj = [te.projection(scene0.render_seed, b, scene0.render_dim) for b in (0, 1)]
    states = [te.initial_state(ep.scene) for ep in episodes]
    horizon = [math.ceil(te.expert_length(ep.scene) / K) + extra_chunks for ep in episodes]
    done = np.zeros(len(episodes), dtype=bool)
    ids_all = np.stack([ep.instruction for ep in episodes])
    for r in range(max(horizon)):
        live = [i for i in range(len(episodes)) if not done[i] and r < horizon[i]]
        if not live:
            break
        imgs = [np.stack([te.describe(episodes[i].scene, states[i], b) for i in live]).astype(float)
                @ proj[b] for b in (0, 1)]
        args = (imgs[0], imgs[1], ids_all[live])
        if getattr(policy, "needs_state", False):
            chunks = policy(*args, states=[states[i] for i in live],
                            scenes=[episodes[i].scene for i in live])
        else:
            chunks = policy(*args)
        for j, i in enumerate(live):
            scene = episodes[i].scene
            for a in np.asarray(chunks[j]).reshape(-1, D)[:K]:
                te.step(scene, states[i], a)
                if te.solved(scene, states[i]):
                    done[i] = True
                    break
    return done


def evaluate(episodes, policy, K, D, extra_chunks=1, samples=None):
    """``{"l1": chunk L1 error on expert states, "success": closed-loop rate}``."""
    success = rollout(episodes, policy, K, D, extra_chunks)
    metrics = {"success": float(success.mean()), "l1": float("nan")}
    if samples is not None and not getattr(policy, "needs_state", False):
        img0, img1, ids, target = samples.batch(np.arange(len(samples)))
        pred = policy(img0, img1, ids)
        metrics["l1"] = float(np.mean(np.abs(pred - target)))
    return metrics
