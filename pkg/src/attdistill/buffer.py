"""Expert trajectories: training, binary persistence and pair sampling.

Buffer file layout (little-endian)::

    magic "ATTB" | version u16 | kind u8 | input_dim u32 | hidden_dim u32
    | num_classes u32 | expert_count u32 | M u32 | param_count u64
    | step_size f64 | batch_size u32 | steps_per_epoch u32
    | dataset_fingerprint 32 bytes
    | per expert: seed u64, (M+1) * param_count f64
    | crc32 u32 over every preceding byte
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import Architecture, LabeledBatch

MAGIC = b"ATTB"
VERSION = 1
KIND_CODES = {nn.LINEAR: 0, nn.MLP1H: 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

_HEADER = struct.Struct("<4sHBIIIIIQdII32s")
_SEED = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class BufferError(Exception):
    """Base class for buffer file problems."""


class BadMagicError(BufferError):
    pass


class VersionMismatchError(BufferError):
    pass


class TruncatedBufferError(BufferError):
    pass


class ChecksumError(BufferError):
    pass


class ExpertDivergedError(RuntimeError):
    def __init__(self, seed, epoch):
        super().__init__(f"expert with seed {seed} diverged (non-finite parameters) in epoch {epoch}")
        self.seed = seed
        self.epoch = epoch


class PairSamplingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainMeta:
    step_size: float
    batch_size: int
    steps_per_epoch: int = 0


@dataclass(eq=False)
class ExpertTrajectory:
    arch: Architecture
    seed: int
    snapshots: np.ndarray  # (M + 1, param_count)
    train_meta: TrainMeta

    @property
    def epochs(self) -> int:
        return self.snapshots.shape[0] - 1

    def __eq__(self, other):
        if not isinstance(other, ExpertTrajectory):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.seed == other.seed
            and self.train_meta == other.train_meta
            and np.array_equal(self.snapshots, other.snapshots)
        )


@dataclass(eq=False)
class TrajectoryBuffer:
    experts: list
    dataset_fingerprint: bytes

    def __post_init__(self):
        if not self.experts:
            raise ValueError("a buffer needs at least one expert")
        first = self.experts[0]
        for e in self.experts[1:]:
            if e.arch != first.arch:
                raise ValueError("experts in one buffer must share an architecture")
            if e.epochs != first.epochs:
                raise ValueError("experts in one buffer must share trajectory length")
            if e.train_meta != first.train_meta:
                raise ValueError("experts in one buffer must share training settings")
        if len(self.dataset_fingerprint) != 32:
            raise ValueError("dataset fingerprint must be 32 bytes")

    @property
    def arch(self) -> Architecture:
        return self.experts[0].arch

    @property
    def epochs(self) -> int:
        return self.experts[0].epochs

    @property
    def train_meta(self) -> TrainMeta:
        return self.experts[0].train_meta

    def __len__(self):
        return len(self.experts)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryBuffer):
            return NotImplemented
        return self.dataset_fingerprint == other.dataset_fingerprint and self.experts == other.experts


@dataclass(frozen=True, eq=False)
class MatchPair:
    expert_index: int
    start_epoch: int
    start: np.ndarray
    target: np.ndarray


def train_expert(
    arch: Architecture,
    dataset: LabeledBatch,
    epochs: int,
    train_meta: TrainMeta,
    seed: int,
) -> ExpertTrajectory:
    """Minibatch SGD on the real data, snapshotting once per epoch.

    Each epoch visits the data in a permutation drawn from a generator
    seeded with ``(seed, epoch)``.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    dataset.check(arch)
    n = len(dataset)
    bs = min(train_meta.batch_size, n)
    steps = math.ceil(n / bs)
    meta = TrainMeta(float(train_meta.step_size), int(train_meta.batch_size), steps)
    x, y = dataset.features, dataset.labels

    params = nn.init_params(arch, seed)
    snaps = [params]
    for epoch in range(1, epochs + 1):
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(steps):
                idx = perm[k * bs : (k + 1) * bs]
                params = params - meta.step_size * nn.batch_grad(arch, params, x[idx], y[idx])
        if not np.all(np.isfinite(params)):
            raise ExpertDivergedError(seed, epoch)
        snaps.append(params)
    return ExpertTrajectory(arch, int(seed), np.stack(snaps), meta)


def build_buffer(arch, dataset, n_experts, epochs, train_meta, base_seed=0, jobs=1):
    from .datasets import fingerprint

    seeds = [base_seed + i for i in range(n_experts)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            experts = list(
                ex.map(train_expert, *zip(*[(arch, dataset, epochs, train_meta, s) for s in seeds]))
            )
    else:
        experts = [train_expert(arch, dataset, epochs, train_meta, s) for s in seeds]
    return TrajectoryBuffer(experts, fingerprint(dataset))


def dump_buffer(buffer: TrajectoryBuffer) -> bytes:
    arch, meta = buffer.arch, buffer.train_meta
    parts = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            KIND_CODES[arch.kind],
            arch.input_dim,
            arch.hidden_dim,
            arch.num_classes,
            len(buffer.experts),
            buffer.epochs,
            arch.param_count,
            meta.step_size,
            meta.batch_size,
            meta.steps_per_epoch,
            buffer.dataset_fingerprint,
        )
    ]
    for e in buffer.experts:
        parts.append(_SEED.pack(e.seed))
        parts.append(np.ascontiguousarray(e.snapshots, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def parse_buffer(raw: bytes) -> TrajectoryBuffer:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"not a trajectory buffer (magic {raw[:4]!r})")
    if len(raw) < 6:
        raise TruncatedBufferError("file ends inside the header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"buffer version {version}, this reader understands {VERSION}")
    if len(raw) < _HEADER.size:
        raise TruncatedBufferError("file ends inside the header")
    (_, _, kind, d_in, d_hid, n_cls, n_exp, m, p, step, bs, spe, fp) = _HEADER.unpack_from(raw, 0)
    if kind not in KIND_NAMES:
        raise BufferError(f"unknown architecture code {kind}")
    arch = Architecture(KIND_NAMES[kind], d_in, n_cls, d_hid)
    if arch.param_count != p:
        raise BufferError(f"param_count {p} disagrees with {arch}")
    per_expert = _SEED.size + (m + 1) * p * 8
    expected = _HEADER.size + n_exp * per_expert + _CRC.size
    if len(raw) < expected:
        raise TruncatedBufferError(f"expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise BufferError(f"{len(raw) - expected} trailing bytes after checksum")
    (crc,) = _CRC.unpack_from(raw, expected - _CRC.size)
    if zlib.crc32(raw[: expected - _CRC.size]) != crc:
        raise ChecksumError("CRC32 mismatch; buffer is corrupted")

    meta = TrainMeta(step, bs, spe)
    experts = []
    pos = _HEADER.size
    for _ in range(n_exp):
        (seed,) = _SEED.unpack_from(raw, pos)
        pos += _SEED.size
        snaps = np.frombuffer(raw, dtype="<f8", count=(m + 1) * p, offset=pos).reshape(m + 1, p)
        pos += (m + 1) * p * 8
        experts.append(ExpertTrajectory(arch, seed, snaps.astype(np.float64), meta))
    return TrajectoryBuffer(experts, fp)


def save_buffer(buffer: TrajectoryBuffer, path) -> int:
    data = dump_buffer(buffer)
    Path(path).write_bytes(data)
    return len(data)


def load_buffer(path) -> TrajectoryBuffer:
    return parse_buffer(Path(path).read_bytes())


def sample_pair(buffer: TrajectoryBuffer, n_t: int, max_start_epoch: int, rng) -> MatchPair:
    """Draw an expert uniformly, then a start epoch uniformly from ``0..max_start_epoch``.

    ``rng`` is a seed or a ``numpy.random.Generator``; pairs are drawn with
    replacement across calls.
    """
    if n_t < 1 or max_start_epoch < 0:
        raise PairSamplingError("need n_t >= 1 and max_start_epoch >= 0")
    if max_start_epoch + n_t > buffer.epochs:
        raise PairSamplingError(
            f"max_start_epoch + N_T = {max_start_epoch + n_t} exceeds trajectory length {buffer.epochs}"
        )
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    i = int(rng.integers(len(buffer.experts)))
    s = int(rng.integers(max_start_epoch + 1))
    snaps = buffer.experts[i].snapshots
    return MatchPair(i, s, snaps[s], snaps[s + n_t])
