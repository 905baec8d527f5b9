"""Outer distillation loop with adaptive (ATT) or fixed (FTL) matching steps."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .buffer import BadMagicError, BufferError, ChecksumError, TrajectoryBuffer, TruncatedBufferError
from .buffer import VersionMismatchError, sample_pair
from .metagrad import SyntheticDataset, UnrollDivergedError, UnrollTape, balanced_labels
from .metagrad import meta_gradients, unroll
from .nn import LabeledBatch

log = logging.getLogger(__name__)

ATT = "att"
FTL = "ftl"
MOMENTUM = 0.5


class IncompatibleBufferError(ValueError):
    pass


@dataclass(frozen=True)
class MatchConfig:
    mode: str = ATT
    n_s: int = 20
    n_t: int = 2
    max_start_epoch: int = 2
    lr_img: float = 100.0
    lr_sc: float = 1e-5
    lr_init: float = 1e-2
    iterations: int = 500
    gamma: int = 2
    ipc: int = 1
    zca: bool = False
    seed: int = 0
    init_mode: str = "real-sample"
    momentum: float = MOMENTUM

    def __post_init__(self):
        if self.mode not in (ATT, FTL):
            raise ValueError(f"mode must be 'att' or 'ftl', got {self.mode!r}")
        if self.n_s < 1 or self.n_t < 1:
            raise ValueError("N_S and N_T must be >= 1")
        if self.max_start_epoch < 0 or self.iterations < 0 or self.ipc < 1:
            raise ValueError("max_start_epoch, iterations must be >= 0 and ipc >= 1")
        if not (self.lr_img > 0 and self.lr_sc > 0 and self.lr_init > 0):
            raise ValueError("lr_img, lr_sc and lr must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.init_mode not in ("noise", "real-sample"):
            raise ValueError(f"init_mode must be 'noise' or 'real-sample', got {self.init_mode!r}")

    def replace(self, **changes) -> "MatchConfig":
        d = asdict(self)
        d.update(changes)
        return MatchConfig(**d)


@dataclass
class IterationRecord:
    iter: int
    expert_index: int
    start_epoch: int
    distances: np.ndarray
    selected_t: int
    loss: float | None
    lr_student_after: float
    diverged: bool = False
    skipped: bool = False

    def to_json(self, trace_distances: bool = False) -> str:
        d = {
            "iter": self.iter,
            "expert_index": self.expert_index,
            "start_epoch": self.start_epoch,
            "selected_t": self.selected_t,
            "loss": self.loss if self.loss is not None and np.isfinite(self.loss) else None,
            "lr_student_after": self.lr_student_after if np.isfinite(self.lr_student_after) else None,
            "diverged": self.diverged,
            "skipped": self.skipped,
        }
        if trace_distances:
            d["distances"] = [float(v) if np.isfinite(v) else None for v in self.distances]
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "IterationRecord":
        d = json.loads(line)
        dist = d.get("distances")
        return cls(
            iter=d["iter"],
            expert_index=d["expert_index"],
            start_epoch=d["start_epoch"],
            distances=None if dist is None else np.array([np.nan if v is None else v for v in dist]),
            selected_t=d["selected_t"],
            loss=d["loss"],
            lr_student_after=np.nan if d["lr_student_after"] is None else d["lr_student_after"],
            diverged=d["diverged"],
            skipped=d.get("skipped", False),
        )


@dataclass
class DistillReport:
    config: MatchConfig
    records: list = field(default_factory=list)
    final_synth: SyntheticDataset | None = None

    @property
    def diverged(self) -> bool:
        return bool(self.records) and self.records[-1].diverged

    def write_jsonl(self, path, trace_distances: bool = False) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.to_json(trace_distances) + "\n")


def read_jsonl(path) -> list:
    with open(path) as f:
        return [IterationRecord.from_json(line) for line in f if line.strip()]


def distance_trace(tape: UnrollTape, target: np.ndarray) -> np.ndarray:
    """Squared L2 distance of every student state (including t=0) to the target."""
    diff = tape.states - np.asarray(target, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def select_step(distances, mode: str, n_s: int) -> int:
    """ATT: first argmin over t in 1..N_S. FTL: always N_S."""
    distances = np.asarray(distances)
    if distances.shape != (n_s + 1,):
        raise ValueError(f"expected {n_s + 1} distances, got {distances.shape}")
    if mode == FTL:
        return n_s
    if mode != ATT:
        raise ValueError(f"unknown mode {mode!r}")
    return 1 + int(np.argmin(distances[1:]))


def init_synth(config: MatchConfig, dataset: LabeledBatch, num_classes: int | None = None) -> SyntheticDataset:
    k = num_classes or int(dataset.labels.max()) + 1
    labels = balanced_labels(k, config.ipc)
    rng = np.random.default_rng(config.seed)
    if config.init_mode == "noise":
        feats = rng.standard_normal((len(labels), dataset.features.shape[1]))
    else:
        rows = []
        for c in range(k):
            idx = np.flatnonzero(dataset.labels == c)
            if len(idx) < config.ipc:
                raise ValueError(f"class {c} has {len(idx)} samples, need {config.ipc}")
            rows.append(dataset.features[rng.choice(idx, config.ipc, replace=False)])
        feats = np.vstack(rows)
    return SyntheticDataset(feats, labels, config.lr_init, config.ipc)


def check_compatible(config: MatchConfig, buffer: TrajectoryBuffer, synth: SyntheticDataset) -> None:
    arch = buffer.arch
    if config.max_start_epoch + config.n_t > buffer.epochs:
        raise IncompatibleBufferError(
            f"buffer has M={buffer.epochs} epochs, config needs max_start_epoch + N_T = "
            f"{config.max_start_epoch + config.n_t}"
        )
    if synth.features.shape[1] != arch.input_dim:
        raise IncompatibleBufferError(f"synthetic features have dim {synth.features.shape[1]}, {arch} expects {arch.input_dim}")
    if synth.num_classes != arch.num_classes:
        raise IncompatibleBufferError(f"synthetic set has {synth.num_classes} classes, {arch} has {arch.num_classes}")


def distill(config: MatchConfig, buffer: TrajectoryBuffer, synth: SyntheticDataset, report_sink=None) -> DistillReport:
    """Run ``config.iterations`` outer steps starting from ``synth`` (left untouched).

    Each step samples an expert pair, unrolls N_S student steps, picks the
    matching step, and applies momentum-SGD to the features (``lr_img``) and
    to the student step size (``lr_sc``). The run stops at the first
    non-finite loss or non-positive step size; that record is flagged.
    """
    check_compatible(config, buffer, synth)
    arch = buffer.arch
    synth = synth.copy()
    rng = np.random.default_rng(config.seed)
    mom_x = np.zeros_like(synth.features)
    mom_lr = 0.0
    report = DistillReport(config)

    def emit(rec):
        report.records.append(rec)
        if report_sink is not None:
            report_sink(rec)

    for it in range(config.iterations):
        pair = sample_pair(buffer, config.n_t, config.max_start_epoch, rng)
        try:
            tape = unroll(arch, pair.start, synth, config.n_s)
        except UnrollDivergedError as exc:
            log.warning("iteration %d: %s", it, exc)
            emit(IterationRecord(it, pair.expert_index, pair.start_epoch, np.full(config.n_s + 1, np.nan),
                                 config.n_s, float("nan"), synth.lr_student, diverged=True))
            break
        dist = distance_trace(tape, pair.target)
        t_sel = select_step(dist, config.mode, config.n_s)
        if config.mode == ATT and dist[0] < dist[t_sel]:
            log.debug("iteration %d: t=0 would have won (e0=%g < e%d=%g)", it, dist[0], t_sel, dist[t_sel])
        denom = dist[0]
        if denom == 0.0:
            log.warning("iteration %d: expert %d start epoch %d is degenerate, skipped", it, pair.expert_index, pair.start_epoch)
            emit(IterationRecord(it, pair.expert_index, pair.start_epoch, dist, t_sel, None,
                                 synth.lr_student, skipped=True))
            continue
        loss = float(dist[t_sel] / denom)
        if not np.isfinite(loss):
            emit(IterationRecord(it, pair.expert_index, pair.start_epoch, dist, t_sel, loss,
                                 synth.lr_student, diverged=True))
            break

        g = meta_gradients(tape, t_sel, pair.start, pair.target)
        mom_x = config.momentum * mom_x + g.d_features
        mom_lr = config.momentum * mom_lr + g.d_lr
        synth.features = synth.features - config.lr_img * mom_x
        synth.lr_student = synth.lr_student - config.lr_sc * mom_lr
        diverged = not (synth.lr_student > 0 and np.all(np.isfinite(synth.features)))
        emit(IterationRecord(it, pair.expert_index, pair.start_epoch, dist, t_sel, loss,
                             synth.lr_student, diverged=diverged))
        if diverged:
            log.warning("iteration %d: diverged (lr_student=%g)", it, synth.lr_student)
            break

    report.final_synth = synth
    return report


# -- synthetic dataset file ---------------------------------------------------

SYNTH_MAGIC = b"ATTS"
SYNTH_VERSION = 1
_SYNTH_HEADER = struct.Struct("<4sHIIIId32s")


def dump_synth(synth: SyntheticDataset, dataset_fingerprint: bytes = b"\0" * 32) -> bytes:
    n, d = synth.features.shape
    body = _SYNTH_HEADER.pack(SYNTH_MAGIC, SYNTH_VERSION, synth.ipc, synth.num_classes, n, d,
                              synth.lr_student, dataset_fingerprint)
    body += np.ascontiguousarray(synth.features, dtype="<f8").tobytes()
    body += np.ascontiguousarray(synth.labels, dtype="<u4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_synth(raw: bytes):
    """Returns ``(synth, dataset_fingerprint)``."""
    if raw[:4] != SYNTH_MAGIC:
        raise BadMagicError(f"not a synthetic dataset file (magic {raw[:4]!r})")
    if len(raw) < _SYNTH_HEADER.size:
        raise TruncatedBufferError("file ends inside the header")
    _, version, ipc, k, n, d, lr, fp = _SYNTH_HEADER.unpack_from(raw, 0)
    if version != SYNTH_VERSION:
        raise VersionMismatchError(f"synthetic file version {version}, expected {SYNTH_VERSION}")
    expected = _SYNTH_HEADER.size + n * d * 8 + n * 4 + 4
    if len(raw) < expected:
        raise TruncatedBufferError(f"expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise BufferError("trailing bytes after checksum")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise ChecksumError("CRC32 mismatch; synthetic file is corrupted")
    pos = _SYNTH_HEADER.size
    feats = np.frombuffer(raw, "<f8", n * d, pos).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(raw, "<u4", n, pos + n * d * 8).astype(np.int64)
    synth = SyntheticDataset(feats, labels, lr, ipc)
    if synth.num_classes != k:
        raise BufferError("class count in header disagrees with labels")
    return synth, fp


def save_synth(synth: SyntheticDataset, path, dataset_fingerprint: bytes = b"\0" * 32) -> None:
    Path(path).write_bytes(dump_synth(synth, dataset_fingerprint))


def load_synth(path):
    return parse_synth(Path(path).read_bytes())
