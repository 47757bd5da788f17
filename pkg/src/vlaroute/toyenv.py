"""Grid-world pick-and-place task with templated instructions.

An agent moves on an ``H x W`` grid with king moves, picks the object named by
the instruction and drops it on the named goal cell.  Actions are continuous
``[drow, dcol, (unused...), grip]`` vectors; the dynamics round the
displacements to ``{-1, 0, 1}`` and read ``grip > 0.5`` as closed.

Scenes are rendered for the model as one token per cell: a frozen random
projection of the cell's one-hot descriptor, with a different projection per
encoder branch.  Branch 1 also sees each occupied cell's offset from the agent.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("cube", "ball", "cup")
RELATIONS = ("the", "left", "right", "top", "bottom")
AXES = ("spatial", "object", "goal")

VOCAB = ("<pad>", "pick", "place") + RELATIONS + COLORS + SHAPES
TOKEN = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0
VOCAB_SIZE = len(VOCAB)
INSTRUCTION_LEN = 6
DESCRIPTOR_DIM = 1 + len(COLORS) + len(SHAPES) + 2 + 1 + len(COLORS)
OFFSET_RANGE = 4  # branch 1 marks occupied cells with their clipped offset from the agent
BRANCH_DIMS = (DESCRIPTOR_DIM, DESCRIPTOR_DIM + 2 * (2 * OFFSET_RANGE + 1))

DATASET_MAGIC = b"CGVD"
DATASET_VERSION = 1


class GenerationError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    axes: tuple = AXES
    grid: tuple = (8, 8)
    n_objects: int = 3
    n_goals: int = 2
    chunk: int = 4
    action_dim: int = 3
    render_dim: int = 48  # at least the widest descriptor, so the projection is injective
    seed: int = 0

    def __post_init__(self):
        if not self.axes or any(a not in AXES for a in self.axes):
            raise GenerationError(f"axes must be a non-empty subset of {AXES}, got {self.axes}")
        if self.action_dim not in (3, 7):
            raise GenerationError("action_dim must be 3 or 7")
        if self.n_objects < 1 or self.n_goals < 1 or self.chunk < 1:
            raise GenerationError("object, goal and chunk counts must be positive")


@dataclass
class GridScene:
    H: int
    W: int
    colors: np.ndarray  # [n] object color ids
    shapes: np.ndarray  # [n] object shape ids
    objects: np.ndarray  # [n, 2] start positions
    goals: np.ndarray  # [g, 2]
    goal_colors: np.ndarray  # [g]
    agent: tuple
    referent: int
    goal: int
    relation: int = 0
    render_seed: int = 0
    render_dim: int = 48  # at least the widest descriptor, so the projection is injective


@dataclass
class WorldState:
    agent: np.ndarray
    objects: np.ndarray
    held: int = -1

    def copy(self):
        return WorldState(self.agent.copy(), self.objects.copy(), self.held)


@dataclass
class Episode:
    scene: GridScene
    instruction: np.ndarray  # int ids, [T]
    trace: np.ndarray  # expert chunks, [n_chunks, K, D]
    renders: tuple = field(default=())  # two [P, render_dim] arrays of the start state

    @property
    def expert_steps(self):
        return expert_length(self.scene)


# ----------------------------------------------------------------- dynamics


def initial_state(scene):
    return WorldState(np.array(scene.agent, dtype=np.int64), scene.objects.astype(np.int64).copy(), -1)


def _object_at(state, pos, skip=-1):
    hits = np.where((state.objects == pos).all(axis=1))[0]
    hits = [int(h) for h in hits if h != skip]
    return hits[0] if hits else -1


def step(scene, state, action):
    """Apply one continuous action in place."""
    move = np.clip(np.floor(np.asarray(action[:2], dtype=float) + 0.5), -1, 1).astype(np.int64)
    state.agent = np.clip(state.agent + move, 0, [scene.H - 1, scene.W - 1])
    if state.held >= 0:
        state.objects[state.held] = state.agent
    # grip is resolved where the agent now stands; a drop onto another object is refused
    grip = float(action[-1]) > 0.5
    if state.held < 0 and grip:
        state.held = _object_at(state, state.agent)
    elif state.held >= 0 and not grip and _object_at(state, state.agent, skip=state.held) < 0:
        state.held = -1
    return state


def solved(scene, state):
    return state.held != scene.referent and bool(
        (state.objects[scene.referent] == scene.goals[scene.goal]).all())


def expert_action(scene, state, action_dim=3):
    a = np.zeros(action_dim)
    if state.held == scene.referent:
        target = scene.goals[scene.goal]
        grip = 1.0
    else:
        target = state.objects[scene.referent]
        grip = 0.0
    delta = np.sign(target - state.agent)
    if not delta.any():
        grip = 1.0 - grip  # pick on arrival at the object, release at the goal
    a[:2] = delta
    a[-1] = grip
    return a


def expert_trace(scene, action_dim=3):
    state = initial_state(scene)
    actions = []
    while not solved(scene, state):
        a = expert_action(scene, state, action_dim)
        actions.append(a)
        step(scene, state, a)
        if len(actions) > 4 * (scene.H + scene.W) + 4:
            raise GenerationError("expert failed to solve scene")
    return np.array(actions)


def _cheb(a, b):
    return int(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def expert_length(scene):
    obj = scene.objects[scene.referent]
    return _cheb(scene.agent, obj) + 1 + _cheb(obj, scene.goals[scene.goal]) + 1


def chunk_actions(actions, K):
    n = max(1, -(-len(actions) // K))
    out = np.zeros((n * K, actions.shape[1]))
    out[:len(actions)] = actions
    return out.reshape(n, K, actions.shape[1])


def expert_chunk(scene, state, K, action_dim=3):
    """The next ``K`` expert actions from ``state``, zero-padded once solved."""
    s = state.copy()
    out = np.zeros((K, action_dim))
    for i in range(K):
        if solved(scene, s):
            break
        out[i] = expert_action(scene, s, action_dim)
        step(scene, s, out[i])
    return out


def success_check(episode, trace):
    """Run a predicted action trace from the episode start; True once solved."""
    actions = np.asarray(trace, dtype=float)
    if actions.size == 0:
        raise ValueError("empty trace")
    actions = actions.reshape(-1, actions.shape[-1])
    scene = episode.scene
    state = initial_state(scene)
    for a in actions:
        step(scene, state, a)
        if solved(scene, state):
            return True
    return False


# ---------------------------------------------------------------- rendering


def describe(scene, state, branch=0):
    """One-hot cell descriptors, ``[H*W, BRANCH_DIMS[branch]]`` uint8.

    Branch 0 holds occupancy, color, shape, agent, held and goal bits.  Branch 1
    adds, for every non-empty cell, the row and column offset from the agent
    clipped to ``+-OFFSET_RANGE`` (a gripper-mounted view).  Empty cells are
    all-zero in both branches.
    """
    if branch not in (0, 1):
        raise ValueError("branch id must be 0 or 1")
    H, W = scene.H, scene.W
    d = np.zeros((H, W, BRANCH_DIMS[branch]), dtype=np.uint8)
    nc, ns = len(COLORS), len(SHAPES)
    for (r, c), col in zip(scene.goals, scene.goal_colors):
        d[r, c, 1 + nc + ns + 2] = 1
        d[r, c, 1 + nc + ns + 3 + col] = 1
    for i, (r, c) in enumerate(state.objects):
        d[r, c, 0] = 1
        d[r, c, 1 + scene.colors[i]] = 1
        d[r, c, 1 + nc + scene.shapes[i]] = 1
    ar, ac = state.agent
    d[ar, ac, 1 + nc + ns] = 1
    d[ar, ac, 1 + nc + ns + 1] = 1 if state.held >= 0 else 0
    if branch == 1:
        span = 2 * OFFSET_RANGE + 1
        rows, cols = np.nonzero(d[:, :, :DESCRIPTOR_DIM].any(axis=2))
        dr = np.clip(rows - ar, -OFFSET_RANGE, OFFSET_RANGE) + OFFSET_RANGE
        dc = np.clip(cols - ac, -OFFSET_RANGE, OFFSET_RANGE) + OFFSET_RANGE
        d[rows, cols, DESCRIPTOR_DIM + dr] = 1
        d[rows, cols, DESCRIPTOR_DIM + span + dc] = 1
    return d.reshape(H * W, -1)


def projection(render_seed, branch, render_dim):
    """Frozen descriptor-to-token projection for one branch."""
    if branch not in (0, 1):
        raise ValueError("branch id must be 0 or 1")
    rng = np.random.default_rng([render_seed, 7919, branch])
    return rng.normal(0.0, 1.0, (BRANCH_DIMS[branch], render_dim))


def render_patches(scene, branch, state=None):
    state = initial_state(scene) if state is None else state
    proj = projection(scene.render_seed, branch, scene.render_dim)
    return describe(scene, state, branch).astype(float) @ proj


# --------------------------------------------------------------- generation


def _instruction(scene):
    ref = scene.referent
    return np.array([TOKEN["pick"], TOKEN[RELATIONS[scene.relation]],
                     TOKEN[COLORS[scene.colors[ref]]], TOKEN[SHAPES[scene.shapes[ref]]],
                     TOKEN["place"], TOKEN[COLORS[scene.goal_colors[scene.goal]]]], dtype=np.int64)


def _extreme(positions, relation):
    key = {1: positions[:, 1], 2: -positions[:, 1], 3: positions[:, 0], 4: -positions[:, 0]}[relation]
    best = key.min()
    hits = np.where(key == best)[0]
    return int(hits[0]) if len(hits) == 1 else -1


def generate_episode(spec, seed):
    rng = np.random.default_rng([spec.seed, seed, 1])
    H, W = spec.grid
    n_goals = spec.n_goals if "goal" in spec.axes else 1
    n_obj = spec.n_objects
    if H * W < n_obj + n_goals + 1:
        raise GenerationError(f"{H}x{W} grid cannot hold {n_obj} objects, {n_goals} goals and the agent")
    if n_goals > len(COLORS):
        raise GenerationError("more goals than goal colors")
    modes = [m for m in ("spatial", "object") if m in spec.axes] or ["object"]
    mode = modes[rng.integers(len(modes))]
    for _ in range(1000):
        cells = rng.choice(H * W, n_obj + n_goals + 1, replace=False)
        pos = np.stack([cells // W, cells % W], axis=1)
        objects, goals, agent = pos[:n_obj], pos[n_obj:n_obj + n_goals], pos[-1]
        if mode == "object":
            if n_obj > len(COLORS) * len(SHAPES):
                raise GenerationError("too many objects for distinct attributes")
            pairs = rng.choice(len(COLORS) * len(SHAPES), n_obj, replace=False)
            colors, shapes = pairs // len(SHAPES), pairs % len(SHAPES)
            referent = int(rng.integers(n_obj))
            relation = 0
        else:
            n_same = n_obj if n_obj <= 2 else int(rng.integers(2, n_obj + 1))
            base = rng.integers(len(COLORS) * len(SHAPES))
            others = rng.choice([p for p in range(len(COLORS) * len(SHAPES)) if p != base],
                                n_obj - n_same, replace=False)
            pairs = np.concatenate([[base] * n_same, others]).astype(np.int64)
            colors, shapes = pairs // len(SHAPES), pairs % len(SHAPES)
            relation = int(rng.integers(1, len(RELATIONS)))
            pick = _extreme(objects[:n_same], relation)
            if pick < 0:
                continue
            referent = pick
        goal_colors = rng.choice(len(COLORS), n_goals, replace=False)
        scene = GridScene(H, W, colors.astype(np.int64), shapes.astype(np.int64), objects,
                          goals, goal_colors.astype(np.int64), (int(agent[0]), int(agent[1])),
                          referent, int(rng.integers(n_goals)), relation, spec.seed, spec.render_dim)
        actions = expert_trace(scene, spec.action_dim)
        return Episode(scene, _instruction(scene), chunk_actions(actions, spec.chunk),
                       (render_patches(scene, 0), render_patches(scene, 1)))
    raise GenerationError("could not place a uniquely identifiable referent")


def generate_dataset(spec, count, seed):
    return [generate_episode(spec, seed * 1_000_003 + i) for i in range(count)]


def referent_matches(scene, words):
    """Indices of objects satisfying the instruction predicate (for audits)."""
    rel, color, shape = words
    same = [i for i in range(len(scene.colors))
            if COLORS[scene.colors[i]] == color and SHAPES[scene.shapes[i]] == shape]
    if rel == "the":
        return same
    pick = _extreme(scene.objects[same], RELATIONS.index(rel))
    return [] if pick < 0 else [same[pick]]


# ----------------------------------------------------------------- samples


def expert_samples(episodes, K, action_dim=3):
    """Every intermediate state of every expert run, paired with its next chunk.

    Returns ``(branch-0 descriptors [N, P, F0], branch-1 descriptors [N, P, F1],
    instructions [N, T], targets [N, K, D])``; descriptors are uint8.
    """
    descs, descs1, instr, targets = [], [], [], []
    for ep in episodes:
        scene = ep.scene
        state = initial_state(scene)
        while not solved(scene, state):
            descs.append(describe(scene, state, 0))
            descs1.append(describe(scene, state, 1))
            instr.append(ep.instruction)
            chunk = expert_chunk(scene, state, K, action_dim)
            targets.append(chunk)
            step(scene, state, chunk[0])
    return np.stack(descs), np.stack(descs1), np.stack(instr), np.stack(targets)


# ------------------------------------------------------------- persistence


def _put_tensor(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _put_ints(buf, values):
    values = [int(v) for v in values]
    buf.write(struct.pack("<I", len(values)))
    buf.write(struct.pack(f"<{len(values)}q", *values))


def _encode_episode(ep):
    s = ep.scene
    buf = io.BytesIO()
    header = [s.H, s.W, s.agent[0], s.agent[1], s.referent, s.goal, s.relation, s.render_seed, s.render_dim]
    _put_ints(buf, header)
    _put_ints(buf, np.concatenate([s.objects, s.colors[:, None], s.shapes[:, None]], axis=1).reshape(-1))
    _put_ints(buf, np.concatenate([s.goals, s.goal_colors[:, None]], axis=1).reshape(-1))
    _put_ints(buf, ep.instruction)
    _put_tensor(buf, ep.trace)
    for r in ep.renders:
        _put_tensor(buf, r)
    return buf.getvalue()


class _Reader:
    def __init__(self, data, record):
        self.data, self.pos, self.record = data, 0, record

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"record {self.record}: truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def ints(self):
        (n,) = struct.unpack("<I", self.take(4))
        return np.array(struct.unpack(f"<{n}q", self.take(8 * n)), dtype=np.int64)

    def tensor(self):
        (rank,) = struct.unpack("<I", self.take(4))
        if rank > 8:
            raise DatasetFormatError(f"record {self.record}: bad tensor rank {rank}")
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def _decode_episode(blob, record):
    rd = _Reader(blob, record)
    try:
        H, W, ar, ac, ref, goal, rel, rseed, rdim = rd.ints()
        objs = rd.ints().reshape(-1, 4)
        goals = rd.ints().reshape(-1, 3)
        instruction = rd.ints()
        trace = rd.tensor()
        renders = (rd.tensor(), rd.tensor())
    except (ValueError, struct.error) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"record {record}: {exc}") from exc
    if rd.pos != len(blob):
        raise DatasetFormatError(f"record {record}: trailing bytes")
    scene = GridScene(int(H), int(W), objs[:, 2].copy(), objs[:, 3].copy(), objs[:, :2].copy(),
                      goals[:, :2].copy(), goals[:, 2].copy(), (int(ar), int(ac)), int(ref),
                      int(goal), int(rel), int(rseed), int(rdim))
    return Episode(scene, instruction, trace, renders)


def dataset_bytes(episodes):
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IQ", DATASET_VERSION, len(episodes)))
    for ep in episodes:
        blob = _encode_episode(ep)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def write_dataset(episodes, path):
    data = dataset_bytes(episodes)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_dataset(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    if len(data) < 16:
        raise DatasetFormatError("truncated header")
    version, count = struct.unpack("<IQ", data[4:16])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    pos, episodes = 16, []
    for i in range(count):
        if pos + 8 > len(data):
            raise DatasetFormatError(f"record {i}: truncated")
        (n,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if pos + n > len(data):
            raise DatasetFormatError(f"record {i}: truncated")
        episodes.append(_decode_episode(data[pos:pos + n], i))
        pos += n
    if pos != len(data):
        raise DatasetFormatError(f"record {count}: trailing bytes after last record")
    return episodes


def content_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
