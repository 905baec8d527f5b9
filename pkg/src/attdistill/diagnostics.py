"""Mismatch histograms, step-selection traces and parameter-stability sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import ATT, DistillReport, MatchConfig, distill, init_synth

DEFAULT_GAMMA = 2
DEFAULT_INTERVAL = 50
DEFAULT_MULTIPLIERS = (0.5, 1.0, 2.0, 5.0)
DEFAULT_REPEATS = 20


class MissingTraceError(ValueError):
    pass


@dataclass
class AmpHistogram:
    interval_size: int
    counts: list
    gamma: int
    n_s: int

    def write_csv(self, path, append=False):
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f)
            if not append:
                w.writerow(["interval_index", "count", "gamma", "N_S"])
            for i, c in enumerate(self.counts):
                w.writerow([i, c, self.gamma, self.n_s])


def _records(report_or_records):
    if isinstance(report_or_records, DistillReport):
        return report_or_records.records
    return list(report_or_records)


def best_step(distances) -> int:
    return 1 + int(np.argmin(np.asarray(distances)[1:]))


def amp_histogram(report, gamma: int = DEFAULT_GAMMA, interval_size: int = DEFAULT_INTERVAL) -> AmpHistogram:
    """Per-interval count of iterations whose best step misses N_S by at least ``gamma``.

    The best step is recomputed from each recorded distance trace, so an FTL
    report yields the counterfactual choice ATT would have made.
    Iterations whose trace is non-finite (a diverged unroll) never count.
    An exact hit never counts, so ``gamma=0`` behaves like ``gamma=1``.
    """
    records = _records(report)
    if interval_size < 1:
        raise ValueError("interval_size must be >= 1")
    n_s = None
    counts = [0] * math.ceil(len(records) / interval_size)
    for k, rec in enumerate(records):
        if rec.distances is None:
            raise MissingTraceError(f"iteration {rec.iter} has no distance trace; rerun with --trace-distances")
        n_s = len(rec.distances) - 1
        if not np.all(np.isfinite(rec.distances)):
            continue
        if abs(n_s - best_step(rec.distances)) >= max(gamma, 1):
            counts[k // interval_size] += 1
    if n_s is None:
        n_s = report.config.n_s if isinstance(report, DistillReport) else 0
    return AmpHistogram(interval_size, counts, gamma, n_s)


@dataclass
class NoptTrace:
    iters: list
    selected: list
    early_mean: float
    late_mean: float

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "selected_t"])
            w.writerows(zip(self.iters, self.selected))


def nopt_trace(report) -> NoptTrace:
    records = _records(report)
    iters = [r.iter for r in records]
    sel = [r.selected_t for r in records]
    if not sel:
        return NoptTrace([], [], float("nan"), float("nan"))
    k = max(1, math.ceil(0.1 * len(sel)))
    return NoptTrace(iters, sel, float(np.mean(sel[:k])), float(np.mean(sel[-k:])))


@dataclass
class SweepCell:
    multiplier: float
    repeat: int
    seed: int
    diverged: bool
    iterations_run: int
    final_lr: float
    last_loss: float | None


@dataclass
class StabilitySweepResult:
    parameter: str
    multipliers: list
    successes: list
    repeats: int
    mode: str = ATT
    cells: list = field(default_factory=list)

    def write_csv(self, path, append=False):
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f)
            if not append:
                w.writerow(["mode", "parameter", "multiplier", "successes", "repeats"])
            for m, s in zip(self.multipliers, self.successes):
                w.writerow([self.mode, self.parameter, m, s, self.repeats])


def _run_cell(args):
    config, buffer, dataset, multiplier, repeat = args
    synth = init_synth(config, dataset, buffer.arch.num_classes)
    report = distill(config, buffer, synth)
    last = report.records[-1] if report.records else None
    return SweepCell(
        multiplier,
        repeat,
        config.seed,
        report.diverged,
        len(report.records),
        report.final_synth.lr_student,
        None if last is None else last.loss,
    )


def stability_sweep(
    base_config: MatchConfig,
    buffer,
    dataset,
    parameter: str,
    multipliers=DEFAULT_MULTIPLIERS,
    repeats: int = DEFAULT_REPEATS,
    jobs: int = 1,
) -> StabilitySweepResult:
    """Scale one learning rate by each multiplier and count non-diverged runs.

    Repeat ``r`` uses seed ``base_config.seed + r``, so a sweep is
    deterministic in the base seed. ``dataset`` seeds the synthetic init.
    """
    if parameter not in ("lr_img", "lr_sc"):
        raise ValueError("parameter must be 'lr_img' or 'lr_sc'")
    multipliers = [float(m) for m in multipliers]
    if any(m <= 0 for m in multipliers):
        raise ValueError("multipliers must be positive")
    base_value = getattr(base_config, parameter)
    jobs_args = [
        (base_config.replace(**{parameter: base_value * m, "seed": base_config.seed + r}), buffer, dataset, m, r)
        for m in multipliers
        for r in range(repeats)
    ]
    if jobs > 1 and len(jobs_args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(_run_cell, jobs_args))
    else:
        cells = [_run_cell(a) for a in jobs_args]
    successes = [sum(1 for c in cells if c.multiplier == m and not c.diverged) for m in multipliers]
    return StabilitySweepResult(parameter, multipliers, successes, repeats, base_config.mode, cells)
