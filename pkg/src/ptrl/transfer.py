"""Moving actor knowledge between robots.

Checkpoint layout (all integers and floats little-endian)::

    b"PTRL"                      magic
    u32                          format version
    u32 n, u32 * n               actor layer widths (input, hidden..., output)
    u32 m, u32 * m               critic layer widths
    f64 *                        actor blocks (weight row-major, then bias),
                                 actor log_std, critic blocks
    u32 len, utf-8 bytes         robot name
    u64                          training iteration count
    i64                          seed
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import (
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    IncompatibleTransferError,
    InputError,
    InvalidCheckpointError,
)
from .net import ActorCriticParams, LayerBlock, MlpShape, init_params

MAGIC = b"PTRL"
VERSION = 1
_F64 = np.dtype("<f8")

FREEZE_MODES = {"none": (), "l1": (1,), "l2": (2,), "both": (1, 2)}
BLOCK_NAMES = {1: "L1", 2: "L2"}


@dataclass(frozen=True)
class FreezeSpec:
    frozen_blocks: frozenset = frozenset()

    def __post_init__(self):
        blocks = frozenset(int(b) for b in self.frozen_blocks)
        if not blocks <= {1, 2}:
            raise ConfigError(f"only hidden blocks 1 (L1) and 2 (L2) can be frozen, got {sorted(blocks)}")
        object.__setattr__(self, "frozen_blocks", blocks)

    def __contains__(self, block: int) -> bool:
        return block in self.frozen_blocks


def make_freeze_spec(mode: str) -> FreezeSpec:
    try:
        return FreezeSpec(frozenset(FREEZE_MODES[mode]))
    except KeyError:
        raise ConfigError(f"unknown freeze mode {mode!r}; choose from {sorted(FREEZE_MODES)}") from None


def trainable_param_count(params: ActorCriticParams, spec: Optional[FreezeSpec]) -> int:
    """Trainable actor parameters (weights, biases, log_std) under ``spec``."""
    total = params.actor_param_count()
    if spec is None:
        return total
    return total - sum(params.actor_layers[k].size for k in spec.frozen_blocks)


@dataclass
class CheckpointMeta:
    robot: str = ""
    iteration: int = 0
    seed: int = 0


def _encode(params: ActorCriticParams, meta: CheckpointMeta) -> bytes:
    params.validate()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for shape in (params.actor_shape, params.critic_shape):
        dims = shape.dims
        parts.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    for _, arr in params.arrays():
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    name = meta.robot.encode("utf-8")
    parts.append(struct.pack("<I", len(name)) + name)
    parts.append(struct.pack("<Qq", int(meta.iteration), int(meta.seed)))
    return b"".join(parts)


def save_checkpoint(params: ActorCriticParams, meta: CheckpointMeta, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = _encode(params, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64)


def _read_dims(reader: _Reader) -> list[int]:
    (n,) = reader.unpack("<I")
    if n < 2 or n > 64:
        raise InvalidCheckpointError(f"implausible layer count {n}")
    return list(reader.unpack(f"<{n}I"))


def _read_layers(reader: _Reader, dims: list[int]) -> list[LayerBlock]:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = reader.floats(fan_in * fan_out).reshape(fan_in, fan_out)
        layers.append(LayerBlock(w, reader.floats(fan_out)))
    return layers


def load_checkpoint(path) -> tuple[ActorCriticParams, CheckpointMeta]:
    data = Path(path).read_bytes()
    reader = _Reader(data)
    magic = reader.take(4)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(version, VERSION)
    actor_dims = _read_dims(reader)
    critic_dims = _read_dims(reader)
    if min(actor_dims + critic_dims) < 1:
        raise InvalidCheckpointError(f"zero-width layer in {actor_dims} / {critic_dims}")
    if critic_dims[0] != actor_dims[0] or critic_dims[-1] != 1:
        raise InvalidCheckpointError(
            f"critic widths {critic_dims} do not chain with actor input {actor_dims[0]} to a scalar"
        )
    expected = sum(a * b + b for a, b in zip(actor_dims[:-1], actor_dims[1:])) + actor_dims[-1]
    expected += sum(a * b + b for a, b in zip(critic_dims[:-1], critic_dims[1:]))
    if len(data) - reader.pos < 8 * expected:
        raise CorruptCheckpointError(f"checkpoint truncated: {expected} parameters declared")
    actor = _read_layers(reader, actor_dims)
    log_std = reader.floats(actor_dims[-1])
    critic = _read_layers(reader, critic_dims)
    (name_len,) = reader.unpack("<I")
    robot = reader.take(name_len).decode("utf-8", errors="replace")
    iteration, seed = reader.unpack("<Qq")
    if reader.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - reader.pos} unexpected trailing bytes")
    params = ActorCriticParams(actor, log_std, critic)
    if not np.all(np.isfinite(log_std)):
        raise InvalidCheckpointError("log_std contains non-finite values")
    return params, CheckpointMeta(robot, iteration, seed)


def transfer_actor(source: ActorCriticParams, target_actor_shape: MlpShape, target_critic_shape: MlpShape,
                   seed: int, copy_io_when_matching: bool = False) -> ActorCriticParams:
    """Initialize a target-robot policy from a source actor.

    Hidden-to-hidden blocks are copied verbatim. Input/output blocks, log_std
    and the whole critic come from a fresh seeded init, except that with
    ``copy_io_when_matching`` an input or output block whose dims agree is
    copied as well.
    """
    src_shape = source.actor_shape
    if src_shape.hidden != target_actor_shape.hidden:
        raise IncompatibleTransferError(
            f"hidden widths differ: source {list(src_shape.hidden)}, target {list(target_actor_shape.hidden)}"
        )
    target = init_params(target_actor_shape, target_critic_shape, seed)
    last = len(target.actor_layers) - 1
    for k in range(1, last):
        target.actor_layers[k] = source.actor_layers[k].copy()
    if copy_io_when_matching:
        for k in (0, last):
            if source.actor_layers[k].weight.shape == target.actor_layers[k].weight.shape:
                target.actor_layers[k] = source.actor_layers[k].copy()
    return target


@dataclass
class MmdConfig:
    bandwidth: Optional[float] = None  # None: median pooled pairwise distance
    lambda_mmd: float = 0.0  # recorded only; no loss uses it


def _as_samples(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InputError(f"{name} must be a non-empty list of vectors")
    return arr


def median_bandwidth(xs: np.ndarray, xt: np.ndarray) -> float:
    pooled = np.vstack([xs, xt])
    if len(pooled) < 2:
        return 1.0
    h = float(np.median(pdist(pooled)))
    return h if h > 0.0 else 1.0


def mmd(samples_s, samples_t, cfg: Optional[MmdConfig] = None) -> float:
    """Biased squared MMD with an RBF kernel of bandwidth ``h``."""
    xs = _as_samples(samples_s, "samples_s")
    xt = _as_samples(samples_t, "samples_t")
    if xs.shape[1] != xt.shape[1]:
        raise InputError(f"dimension mismatch: {xs.shape[1]} vs {xt.shape[1]}")
    cfg = cfg or MmdConfig()
    h = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(xs, xt)
    if not h > 0.0:
        raise InputError("kernel bandwidth must be positive")

    def mean_k(a, b):
        # fsum is exactly rounded, so swapping the sets gives the same bits
        return math.fsum(np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * h * h)).ravel()) / (len(a) * len(b))

    value = mean_k(xs, xs) + mean_k(xt, xt) - 2.0 * mean_k(xs, xt)
    return max(float(value), 0.0)
