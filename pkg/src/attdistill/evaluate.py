"""Train fresh networks on a synthetic set and score them on held-out data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .metagrad import SyntheticDataset, balanced_labels
from .nn import Architecture, LabeledBatch

# offset keeps evaluation inits away from the seeds used for experts
EVAL_SEED_BASE = 100_000


@dataclass
class EvalConfig:
    archs: list
    test_set: LabeledBatch
    n_seeds: int = 5
    train_steps: int = 300
    use_learned_lr: bool = True
    lr_override: float | None = None
    seed_base: int = EVAL_SEED_BASE

    def __post_init__(self):
        if self.n_seeds < 1 or self.train_steps < 1:
            raise ValueError("n_seeds and train_steps must be >= 1")
        if not self.use_learned_lr and not self.lr_override:
            raise ValueError("lr_override is required when use_learned_lr is off")


@dataclass
class ArchResult:
    arch: Architecture
    seeds: list
    per_seed_acc: list
    diverged: list = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.per_seed_acc))

    @property
    def std_acc(self) -> float:
        # population std
        return float(np.std(self.per_seed_acc))


@dataclass
class EvalResult:
    results: dict  # str(arch) -> ArchResult

    def __getitem__(self, key):
        return self.results[str(key)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["arch", "seed", "accuracy", "diverged"])
            for name, r in self.results.items():
                for s, a, d in zip(r.seeds, r.per_seed_acc, r.diverged):
                    w.writerow([name, s, repr(a), int(d)])
                w.writerow([name, "mean", repr(r.mean_acc), ""])
                w.writerow([name, "std", repr(r.std_acc), ""])


def train_on_synth(arch: Architecture, synth: SyntheticDataset, steps: int, lr: float, seed: int):
    """Full-batch SGD from a fresh init; returns ``(params, diverged)``."""
    x, y = synth.features, synth.labels
    params = nn.init_params(arch, seed)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            params = params - lr * nn.batch_grad(arch, params, x, y)
            if not np.all(np.isfinite(params)):
                return params, True
    return params, False


def evaluate(synth: SyntheticDataset, config: EvalConfig) -> EvalResult:
    lr = synth.lr_student if config.use_learned_lr else config.lr_override
    out = {}
    for arch in config.archs:
        synth.as_batch().check(arch)
        config.test_set.check(arch)
        seeds = [config.seed_base + i for i in range(config.n_seeds)]
        accs, flags = [], []
        for s in seeds:
            params, diverged = train_on_synth(arch, synth, config.train_steps, lr, s)
            accs.append(0.0 if diverged else nn.accuracy(arch, params, config.test_set))
            flags.append(diverged)
        out[str(arch)] = ArchResult(arch, seeds, accs, flags)
    return EvalResult(out)


def random_subset_baseline(dataset: LabeledBatch, ipc: int, seed: int, lr_init: float = 1e-2) -> SyntheticDataset:
    """IPC real samples per class, drawn without replacement."""
    rng = np.random.default_rng(seed)
    k = int(dataset.labels.max()) + 1
    rows = []
    for c in range(k):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} samples, need {ipc}")
        rows.append(dataset.features[np.sort(rng.choice(idx, ipc, replace=False))])
    return SyntheticDataset(np.vstack(rows), balanced_labels(k, ipc), lr_init, ipc)
