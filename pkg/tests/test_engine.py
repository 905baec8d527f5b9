import logging

import numpy as np
import pytest

from attdistill import buffer as bf
from attdistill import engine
from attdistill import metagrad as mg
from attdistill import nn
from attdistill.engine import MatchConfig
from attdistill.nn import Architecture, LabeledBatch


def brute_select(distances, mode, n_s):
    if mode == "ftl":
        return n_s
    best = 1
    for t in range(2, n_s + 1):
        if distances[t] < distances[best]:
            best = t
    return best


def test_select_examples():
    assert engine.select_step([5, 4, 3, 2, 1], "att", 4) == 4
    assert engine.select_step([0.1, 9, 9, 9], "att", 3) == 1
    assert engine.select_step([5, 2, 2, 7], "att", 3) == 1
    assert engine.select_step([0.1, 9, 0, 9], "ftl", 3) == 3
    with pytest.raises(ValueError):
        engine.select_step([1, 2], "att", 3)


def test_select_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n_s = int(rng.integers(1, 12))
        d = rng.integers(0, 4, n_s + 1).astype(float)  # small alphabet forces ties
        for mode in ("att", "ftl"):
            assert engine.select_step(d, mode, n_s) == brute_select(d, mode, n_s)


def test_selection_normalization_invariance():
    rng = np.random.default_rng(1)
    for _ in range(500):
        d = rng.random(9) * 10 + 1e-3
        assert engine.select_step(d, "att", 8) == engine.select_step(d / d[0], "att", 8)


def small_tape(lr=0.2):
    arch = Architecture("mlp1h", 2, 2, 3)
    synth = mg.SyntheticDataset(np.array([[1.0, 0.5], [-0.3, 1.2]]), np.array([0, 1]), lr, 1)
    return mg.unroll(arch, nn.init_params(arch, 0), synth, 4)


def test_distance_trace_examples():
    tape = small_tape()
    d = engine.distance_trace(tape, tape.states[3])
    assert d.shape == (5,) and d[3] == 0.0
    target = np.linspace(-1, 1, tape.states.shape[1])
    d = engine.distance_trace(tape, target)
    for t in range(5):
        assert d[t] == pytest.approx(sum((a - b) ** 2 for a, b in zip(tape.states[t], target)), rel=1e-13)
    frozen = small_tape(lr=0.0)
    d0 = engine.distance_trace(frozen, target)
    assert np.all(d0 == np.sum((frozen.start - target) ** 2))


def test_init_synth_modes(blobs_data):
    cfg = MatchConfig(ipc=2, seed=3)
    s = engine.init_synth(cfg, blobs_data.train)
    assert s.labels.tolist() == [0, 0, 1, 1, 2, 2] and s.lr_student == cfg.lr_init
    rows = {tuple(r): y for r, y in zip(blobs_data.train.features, blobs_data.train.labels)}
    assert all(rows[tuple(r)] == y for r, y in zip(s.features, s.labels))
    n1 = engine.init_synth(cfg.replace(init_mode="noise"), blobs_data.train)
    n2 = engine.init_synth(cfg.replace(init_mode="noise"), blobs_data.train)
    assert n1 == n2
    with pytest.raises(ValueError):
        engine.init_synth(cfg.replace(ipc=10_000), blobs_data.train)


def test_match_config_validation():
    for bad in (dict(n_s=0), dict(lr_img=0), dict(lr_sc=-1), dict(gamma=-1), dict(mode="mtt")):
        with pytest.raises(ValueError):
            MatchConfig(**bad)


def test_zero_iterations(blobs_buffer, blobs_data):
    cfg = MatchConfig(iterations=0, max_start_epoch=2)
    synth = engine.init_synth(cfg, blobs_data.train)
    r = engine.distill(cfg, blobs_buffer, synth)
    assert r.records == [] and r.final_synth == synth and not r.diverged


def test_distill_does_not_mutate_input(blobs_buffer, blobs_data):
    cfg = MatchConfig(iterations=5, n_s=5, max_start_epoch=2, lr_img=1.0, lr_sc=1e-3, lr_init=0.1)
    synth = engine.init_synth(cfg, blobs_data.train)
    before = synth.copy()
    r = engine.distill(cfg, blobs_buffer, synth)
    assert synth == before and r.final_synth != before


def test_incompatible_buffer(blobs_buffer, blobs_data):
    cfg = MatchConfig(max_start_epoch=9, n_t=2)
    with pytest.raises(engine.IncompatibleBufferError):
        engine.distill(cfg, blobs_buffer, engine.init_synth(cfg, blobs_data.train))
    synth = mg.SyntheticDataset(np.zeros((2, 2)), np.array([0, 1]), 0.1, 1)
    with pytest.raises(engine.IncompatibleBufferError):
        engine.distill(MatchConfig(max_start_epoch=1), blobs_buffer, synth)


def test_dominance_every_iteration(att_report):
    for r in att_report.records:
        d = r.distances
        assert 1 <= r.selected_t <= att_report.config.n_s
        assert np.all(d[r.selected_t] <= d[1:])
        assert r.loss == pytest.approx(d[r.selected_t] / d[0], rel=1e-15)
        assert r.loss <= d[-1] / d[0]


def test_att_and_ftl_loss_regression(att_report, ftl_report):
    # frozen from the reference run of the shipped blobs3-ipc1 config
    for rep, first, last in ((att_report, 0.10516511443581257, 0.058831403382462295),
                             (ftl_report, 0.14760145914878245, 0.08978280264561427)):
        loss = [r.loss for r in rep.records]
        assert len(loss) == 500 and not rep.diverged
        assert np.mean(loss[-50:]) < np.mean(loss[:50])
        assert np.mean(loss[:50]) == pytest.approx(first, rel=1e-6)
        assert np.mean(loss[-50:]) == pytest.approx(last, rel=1e-6)
    assert att_report.final_synth.lr_student == pytest.approx(0.1883822791634247, rel=1e-6)
    assert all(r.selected_t == 20 for r in ftl_report.records)


def test_identical_seeds_identical_runs(run_distill, tmp_path):
    a = run_distill(mode="ftl", iterations=40)
    b = run_distill(mode="ftl", iterations=40)
    a.write_jsonl(tmp_path / "a.jsonl", trace_distances=True)
    b.write_jsonl(tmp_path / "b.jsonl", trace_distances=True)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert a.final_synth.features.tobytes() == b.final_synth.features.tobytes()


def test_momentum_update_by_hand(blobs_buffer, blobs_data):
    cfg = MatchConfig(iterations=2, n_s=4, max_start_epoch=2, lr_img=0.5, lr_sc=1e-3, lr_init=0.1, seed=5)
    synth = engine.init_synth(cfg, blobs_data.train)
    report = engine.distill(cfg, blobs_buffer, synth)
    rng = np.random.default_rng(cfg.seed)
    x, lr = synth.features.copy(), synth.lr_student
    bx, blr = np.zeros_like(x), 0.0
    for rec in report.records:
        pair = bf.sample_pair(blobs_buffer, cfg.n_t, cfg.max_start_epoch, rng)
        cur = mg.SyntheticDataset(x, synth.labels, lr, 1)
        tape = mg.unroll(blobs_buffer.arch, pair.start, cur, cfg.n_s)
        t = brute_select(engine.distance_trace(tape, pair.target), "att", cfg.n_s)
        assert t == rec.selected_t
        g = mg.meta_gradients(tape, t, pair.start, pair.target)
        bx, blr = 0.5 * bx + g.d_features, 0.5 * blr + g.d_lr
        x, lr = x - cfg.lr_img * bx, lr - cfg.lr_sc * blr
        assert rec.lr_student_after == lr
    assert np.array_equal(report.final_synth.features, x)


def test_divergence_truncates(run_distill):
    r = run_distill(mode="att", lr_sc=1e3, iterations=100)
    assert r.diverged
    assert len(r.records) < 100
    assert [x.iter for x in r.records] == list(range(len(r.records)))
    assert r.records[-1].lr_student_after <= 0 or not np.isfinite(r.records[-1].loss)
    assert not any(x.diverged for x in r.records[:-1])


def test_degenerate_pair_skipped(caplog):
    arch = Architecture("linear", 2, 2)
    data = LabeledBatch(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]))
    snaps = np.tile(nn.init_params(arch, 0), (3, 1))  # stationary expert
    expert = bf.ExpertTrajectory(arch, 0, snaps, bf.TrainMeta(0.1, 2, 1))
    buf = bf.TrajectoryBuffer([expert], b"\0" * 32)
    cfg = MatchConfig(iterations=4, n_s=2, n_t=1, max_start_epoch=1, lr_img=1.0, lr_sc=1e-3, lr_init=0.1)
    with caplog.at_level(logging.WARNING):
        r = engine.distill(cfg, buf, engine.init_synth(cfg, data))
    assert len(r.records) == 4 and all(x.skipped and x.loss is None for x in r.records)
    assert "degenerate" in caplog.text
    assert not r.diverged


def test_jsonl_roundtrip(att_report, tmp_path):
    p = tmp_path / "r.jsonl"
    att_report.write_jsonl(p)
    back = engine.read_jsonl(p)
    assert [r.selected_t for r in back] == [r.selected_t for r in att_report.records]
    assert back[0].distances is None
    att_report.write_jsonl(p, trace_distances=True)
    back = engine.read_jsonl(p)
    assert np.array_equal(back[7].distances, att_report.records[7].distances)
    assert back[7].loss == att_report.records[7].loss


def test_synth_file_roundtrip(att_report, tmp_path):
    fp = bytes(range(32))
    engine.save_synth(att_report.final_synth, tmp_path / "s.atts", fp)
    synth, fp2 = engine.load_synth(tmp_path / "s.atts")
    assert synth == att_report.final_synth and fp2 == fp
    raw = bytearray((tmp_path / "s.atts").read_bytes())
    assert raw[:4] == b"ATTS"
    raw[70] ^= 0xFF
    with pytest.raises(bf.ChecksumError):
        engine.parse_synth(bytes(raw))
