"""Binary checkpoints.

Layout (little-endian): magic ``CGVL``, u32 version, u64-length config text
(canonical key-sorted ``key=value`` lines), u64 training step, u64-length RNG
state (JSON), u32 tensor count, then per tensor: u32 name length, name bytes,
u32 rank, u64 extents, float64 data.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, Model, ModelConfig

MAGIC = b"CGVL"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> float64 array
    step: int = 0
    rng_state: dict = field(default_factory=dict)


def checkpoint_bytes(model, step=0, rng_state=None):
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = model.cfg.to_text().encode()
    out += struct.pack("<Q", len(cfg)) + cfg
    out += struct.pack("<Q", step)
    rng = json.dumps(rng_state or {}, sort_keys=True).encode()
    out += struct.pack("<Q", len(rng)) + rng
    params = list(model.named_parameters())
    out += struct.pack("<I", len(params))
    for name, p in params:
        raw = name.encode()
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def save_checkpoint(model, path, step=0, rng_state=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, step, rng_state))


class _Cursor:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data):
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic bytes)")
    (version,) = cur.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    (n,) = cur.unpack("<Q", "config length")
    try:
        config = ModelConfig.from_text(cur.take(n, "config").decode())
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from exc
    (step,) = cur.unpack("<Q", "step")
    (n,) = cur.unpack("<Q", "rng length")
    try:
        rng_state = json.loads(cur.take(n, "rng state").decode())
    except ValueError as exc:
        raise CheckpointFormatError(f"bad rng state: {exc}") from exc
    (count,) = cur.unpack("<I", "tensor count")
    params = {}
    for i in range(count):
        (ln,) = cur.unpack("<I", f"tensor {i} name length")
        name = cur.take(ln, f"tensor {i} name").decode()
        (rank,) = cur.unpack("<I", f"tensor {name} rank")
        shape = cur.unpack(f"<{rank}Q", f"tensor {name} extents")
        size = int(np.prod(shape, dtype=np.int64))
        buf = cur.take(8 * size, f"tensor {name} data")
        params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    if cur.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - cur.pos} trailing bytes")
    return Checkpoint(config, params, step, rng_state)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def restore(model, ckpt):
    """Copy checkpoint tensors into ``model``; configs must match exactly."""
    if model.cfg != ckpt.config:
        diff = sorted(k for k, v in vars(ckpt.config).items() if getattr(model.cfg, k) != v)
        raise CheckpointMismatchError(f"checkpoint config differs in: {', '.join(diff)}")
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatchError(str(exc)) from exc
    return model


def model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    return restore(Model(ckpt.config), ckpt), ckpt
