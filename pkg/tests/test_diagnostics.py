import csv
import math

import numpy as np
import pytest

from attdistill import diagnostics as dg
from attdistill import engine
from attdistill import metagrad as mg
from attdistill.engine import DistillReport, IterationRecord, MatchConfig
from tests.conftest import OVERSHOOT_C, OVERSHOOT_LR


def recount(records, gamma, interval):
    """Independent tally: plain loops, no shared helpers."""
    out = [0] * ((len(records) + interval - 1) // interval)
    for k, rec in enumerate(records):
        d = list(rec.distances)
        if any(v != v or v in (float("inf"), float("-inf")) for v in d):
            continue
        n_s = len(d) - 1
        best = 1
        for t in range(1, n_s + 1):
            if d[t] < d[best]:
                best = t
        gap = abs(n_s - best)
        if gap >= gamma and gap > 0:
            out[k // interval] += 1
    return out


def report_from_traces(traces, mode="ftl"):
    n_s = len(traces[0]) - 1
    recs = [IterationRecord(i, 0, 0, np.asarray(d, float), n_s if mode == "ftl" else 1 + int(np.argmin(d[1:])),
                            0.5, 0.1) for i, d in enumerate(traces)]
    return DistillReport(MatchConfig(mode=mode, n_s=n_s), recs)


def test_gamma_zero_counts_every_miss():
    traces = [[9, 5, 1, 3], [9, 3, 2, 1], [9, 1, 2, 3], [9, 2, 2, 2]]
    h = dg.amp_histogram(report_from_traces(traces), gamma=0, interval_size=50)
    assert h.counts == [3]  # only the second trace hits N_S=3 exactly


def test_monotone_traces_never_count():
    traces = [list(np.linspace(10, 1, 11)) for _ in range(120)]
    for g in range(1, 6):
        h = dg.amp_histogram(report_from_traces(traces), gamma=g)
        assert h.counts == [0, 0, 0] and h.n_s == 10


def test_hand_built_gap_report():
    rng = np.random.default_rng(0)
    n_s = 8
    gaps = rng.choice([0, 1, 3], size=100)
    traces = []
    for gap in gaps:
        d = np.full(n_s + 1, 10.0)
        d[n_s - gap] = 1.0
        traces.append(d)
    h = dg.amp_histogram(report_from_traces(traces), gamma=2, interval_size=50)
    assert h.counts == [int(np.sum(gaps[:50] == 3)), int(np.sum(gaps[50:] == 3))]
    assert h.counts == recount(report_from_traces(traces).records, 2, 50)


def test_histogram_matches_recount_on_real_run(ftl_report):
    for g in range(6):
        for interval in (50, 37, 500):
            h = dg.amp_histogram(ftl_report, g, interval)
            assert h.counts == recount(ftl_report.records, g, interval)
            assert len(h.counts) == math.ceil(len(ftl_report.records) / interval)
            assert all(c <= interval for c in h.counts)


def test_att_mode_histogram_uses_own_selection(att_report):
    n_s = att_report.config.n_s
    for g in (0, 1, 2, 5):
        h = dg.amp_histogram(att_report, g, 50)
        for i, c in enumerate(h.counts):
            chunk = att_report.records[i * 50:(i + 1) * 50]
            assert c == sum(1 for r in chunk if n_s - r.selected_t >= max(g, 1))
    assert sum(dg.amp_histogram(att_report, 0).counts) > 0


def test_missing_traces(att_report, tmp_path):
    att_report.write_jsonl(tmp_path / "r.jsonl")
    with pytest.raises(dg.MissingTraceError):
        dg.amp_histogram(engine.read_jsonl(tmp_path / "r.jsonl"))


def test_histogram_csv(ftl_report, tmp_path):
    dg.amp_histogram(ftl_report, 2).write_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["interval_index", "count", "gamma", "N_S"] and len(rows) == 11
    assert rows[1][2:] == ["2", "20"]


def test_defaults():
    assert dg.DEFAULT_GAMMA == 2
    assert dg.DEFAULT_INTERVAL == 50
    assert dg.DEFAULT_REPEATS == 20


def test_nopt_trace_constant_and_empty():
    traces = [[5.0, 1.0, 2.0, 3.0]] * 30
    tr = dg.nopt_trace(report_from_traces(traces, mode="att"))
    assert tr.selected == [1] * 30 and tr.early_mean == tr.late_mean == 1.0
    empty = dg.nopt_trace(DistillReport(MatchConfig(), []))
    assert empty.iters == [] and empty.selected == []


def test_nopt_trace_verbatim(att_report):
    tr = dg.nopt_trace(att_report)
    assert tr.selected == [r.selected_t for r in att_report.records]
    assert tr.early_mean == np.mean(tr.selected[:50]) and tr.late_mean == np.mean(tr.selected[-50:])


def test_nopt_observation_n_s_30(run_distill):
    # Recorded observation, not an invariant: on this toy problem the selected
    # step drifts downward over the run (early 16.06, late 14.62).
    tr = dg.nopt_trace(run_distill(mode="att", n_s=30))
    assert tr.early_mean == pytest.approx(16.06, abs=1e-12)
    assert tr.late_mean == pytest.approx(14.62, abs=1e-12)


def test_overshoot_instance_is_analytic(overshoot_instance):
    arch, data, buf, match = overshoot_instance
    pair = buf.experts[0].snapshots
    synth = engine.init_synth(match, data)
    assert np.array_equal(synth.features, data.features)
    tape = mg.unroll(arch, pair[0], synth, 1)
    g = mg.meta_gradients(tape, 1, pair[0], pair[1])
    expected = 2 * (OVERSHOOT_LR - OVERSHOOT_C) / OVERSHOOT_C ** 2
    assert g.d_lr == pytest.approx(expected, rel=1e-9)
    # lr after one step with multiplier m: lr - m * lr_sc * d_lr; negative once m > 2.5
    assert OVERSHOOT_LR - 5 * match.lr_sc * expected < 0 < OVERSHOOT_LR - 2 * match.lr_sc * expected


def test_sweep_constructed_instance(overshoot_instance):
    arch, data, buf, match = overshoot_instance
    res = dg.stability_sweep(match, buf, data, "lr_sc", multipliers=[5.0], repeats=20)
    assert res.successes == [0] and res.repeats == 20
    for cell in res.cells:
        assert cell.diverged and cell.iterations_run == 1 and cell.final_lr < 0


def test_sweep_zero_repeats(overshoot_instance):
    arch, data, buf, match = overshoot_instance
    res = dg.stability_sweep(match, buf, data, "lr_img", multipliers=[1.0, 2.0], repeats=0)
    assert res.successes == [0, 0] and res.cells == [] and res.multipliers == [1.0, 2.0]


def test_sweep_validation(overshoot_instance):
    _, data, buf, match = overshoot_instance
    with pytest.raises(ValueError):
        dg.stability_sweep(match, buf, data, "lr", [1.0])
    with pytest.raises(ValueError):
        dg.stability_sweep(match, buf, data, "lr_sc", [0.0])


def test_sweep_failures_are_genuine(blobs_cfg, blobs_buffer, blobs_data):
    # detection only converts runs that really failed: every failed cell shows
    # a non-positive step size or a non-finite loss, every success ran to the end
    base = blobs_cfg.match.replace(iterations=60)
    res = dg.stability_sweep(base, blobs_buffer, blobs_data.train, "lr_sc", [1.0, 50.0], repeats=4)
    assert sum(res.successes) + sum(c.diverged for c in res.cells) == 8
    for c in res.cells:
        if c.diverged:
            assert c.final_lr <= 0 or c.last_loss is None or not np.isfinite(c.last_loss)
        else:
            assert c.iterations_run == 60 and c.final_lr > 0
    assert res.successes[0] == 4


def test_sweep_parallel_equals_serial(blobs_cfg, blobs_buffer, blobs_data):
    base = blobs_cfg.match.replace(iterations=15)
    a = dg.stability_sweep(base, blobs_buffer, blobs_data.train, "lr_img", [1.0, 100.0], repeats=3, jobs=1)
    b = dg.stability_sweep(base, blobs_buffer, blobs_data.train, "lr_img", [1.0, 100.0], repeats=3, jobs=2)
    assert a.successes == b.successes
    assert [c.final_lr for c in a.cells] == [c.final_lr for c in b.cells]
