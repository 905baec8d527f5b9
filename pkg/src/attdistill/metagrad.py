"""Student unrolling on the synthetic set and exact meta-gradients.

The student runs full-batch SGD on the synthetic set with one shared
step size ``lr_student``::

    theta[k+1] = theta[k] - lr_student * g(theta[k], X)

The matching loss at step ``t`` is ``|theta[t] - target|^2 / |start - target|^2``.
Its gradient w.r.t. ``X`` and ``lr_student`` is obtained by a reverse sweep
over the stored states, using Hessian-vector and mixed second-derivative
products of the cross-entropy gradient at each visited state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Architecture, LabeledBatch


class UnrollDivergedError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"student trajectory became non-finite at step {step}")
        self.step = step


class DegenerateExpertError(ValueError):
    """The expert start and target coincide, so the normalized loss is undefined."""


def balanced_labels(num_classes: int, ipc: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes, dtype=np.int64), ipc)


@dataclass(eq=False)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    lr_student: float
    ipc: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise nn.DimensionError("features and labels disagree on row count")
        counts = np.bincount(self.labels)
        if self.ipc < 1 or np.any(counts != self.ipc):
            raise ValueError(f"labels must hold exactly {self.ipc} rows per class")
        self.lr_student = float(self.lr_student)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def diverged(self) -> bool:
        return not (self.lr_student > 0 and np.all(np.isfinite(self.features)))

    def as_batch(self) -> LabeledBatch:
        return LabeledBatch(self.features, self.labels)

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.features.copy(), self.labels.copy(), self.lr_student, self.ipc)

    def __eq__(self, other):
        if not isinstance(other, SyntheticDataset):
            return NotImplemented
        return (
            self.ipc == other.ipc
            and self.lr_student == other.lr_student
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class UnrollTape:
    arch: Architecture
    features: np.ndarray
    labels: np.ndarray
    lr_student: float
    states: np.ndarray  # (t_max + 1, P)
    grads: np.ndarray  # (t_max, P); grads[k] = g(states[k])

    @property
    def t_max(self) -> int:
        return self.states.shape[0] - 1

    @property
    def start(self) -> np.ndarray:
        return self.states[0]


@dataclass
class MetaGradients:
    d_features: np.ndarray
    d_lr: float


def unroll(arch: Architecture, start: np.ndarray, synth: SyntheticDataset, t_max: int) -> UnrollTape:
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    synth.as_batch().check(arch)
    theta = nn._check_params(arch, start).copy()
    x = synth.features.copy()
    y = synth.labels.copy()
    lr = synth.lr_student
    states = np.empty((t_max + 1, arch.param_count))
    grads = np.empty((t_max, arch.param_count))
    states[0] = theta
    for k in range(t_max):
        with np.errstate(over="ignore", invalid="ignore"):
            g = nn.batch_grad(arch, theta, x, y)
            theta = theta - lr * g
        if not np.all(np.isfinite(theta)):
            raise UnrollDivergedError(k + 1)
        grads[k] = g
        states[k + 1] = theta
    return UnrollTape(arch, x, y, lr, states, grads)


def match_loss(theta_pred: np.ndarray, start: np.ndarray, target: np.ndarray) -> float:
    theta_pred, start, target = (np.asarray(a, dtype=np.float64) for a in (theta_pred, start, target))
    if not theta_pred.shape == start.shape == target.shape:
        raise nn.DimensionError("match_loss operands differ in length")
    denom = float(np.sum((start - target) ** 2))
    if denom == 0.0:
        raise DegenerateExpertError("expert start equals target")
    return float(np.sum((theta_pred - target) ** 2)) / denom


def meta_gradients(tape: UnrollTape, t_sel: int, start: np.ndarray, target: np.ndarray) -> MetaGradients:
    """Gradient of ``match_loss(states[t_sel], start, target)`` by reverse sweep.

    Only steps ``0..t_sel-1`` are visited; anything unrolled beyond
    ``t_sel`` is ignored.
    """
    if not 1 <= t_sel <= tape.t_max:
        raise ValueError(f"t_sel={t_sel} outside 1..{tape.t_max}")
    if not np.all(np.isfinite(tape.states[: t_sel + 1])):
        raise UnrollDivergedError(t_sel)
    denom = float(np.sum((start - target) ** 2))
    if denom == 0.0:
        raise DegenerateExpertError("expert start equals target")

    arch, lr = tape.arch, tape.lr_student
    adj = 2.0 * (tape.states[t_sel] - target) / denom
    d_lr = 0.0
    d_x = np.zeros_like(tape.features)
    for k in range(t_sel - 1, -1, -1):
        d_lr -= float(adj @ tape.grads[k])
        hv, dx = nn.grad_vjp(arch, tape.states[k], tape.features, tape.labels, adj)
        d_x -= lr * dx
        adj = adj - lr * hv
    return MetaGradients(d_x, d_lr)


def unrolled_loss(arch, start, features, labels, lr, t_sel, target) -> float:
    """Matching loss after ``t_sel`` plain SGD steps, recomputed from scratch."""
    batch = LabeledBatch(features, labels)
    theta = np.asarray(start, dtype=np.float64)
    for k in range(t_sel):
        theta = nn.sgd_step(theta, nn.grad(arch, theta, batch), lr)
        if not np.all(np.isfinite(theta)):
            raise UnrollDivergedError(k + 1)
    return match_loss(theta, start, target)


def fd_oracle(arch, start, synth: SyntheticDataset, t_sel: int, target, h: float = 1e-6) -> MetaGradients:
    """Central differences of the matching loss, one full re-unroll per perturbation."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = synth.features
    d_x = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fp = unrolled_loss(arch, start, xp, synth.labels, synth.lr_student, t_sel, target)
        fm = unrolled_loss(arch, start, xm, synth.labels, synth.lr_student, t_sel, target)
        d_x[idx] = (fp - fm) / (2 * h)
    lr = synth.lr_student
    fp = unrolled_loss(arch, start, x0, synth.labels, lr + h, t_sel, target)
    fm = unrolled_loss(arch, start, x0, synth.labels, lr - h, t_sel, target)
    return MetaGradients(d_x, (fp - fm) / (2 * h))


def relative_error(a, b) -> float:
    """Largest absolute difference scaled by the largest magnitude of either side."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    scale = max(np.abs(a).max(), np.abs(b).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)
