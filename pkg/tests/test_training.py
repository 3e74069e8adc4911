import csv

import numpy as np
import pytest

from fdm.autodiff import NumericError, Tensor, checked, no_grad
from fdm.model import FDM, ModelConfig, tag_of
from fdm.train import (
    AdamW,
    AttentionBaseline,
    Corpus,
    accumulate_grads,
    cosine_lr,
    encode,
    eval_mqar,
    generate_mqar,
    load_corpus,
    replay_answers,
    train_step,
)
from fdm.train.corpus import desk_corpus_text, sample_windows
from fdm.train.freeze_scan import LOG_FIELDS, FreezeScanSchedule, run_freeze_scan
from fdm.train.mqar import MqarTrainConfig, train_mqar


def toy_corpus(n=400):
    text = "".join(f"item {i}: the value {i * 31 % 97} repeats.\n\n" for i in range(n))
    data = encode(text)
    return Corpus(data[:-3000], data[-3000:])


# -------------------------------------------------------------- optimizer
def test_adamw_first_step_is_signed_lr():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    w.grad = np.array([0.5, -3.0])
    AdamW(lr=0.1, weight_decay=0.0, grad_clip=None).step([("w", w)])
    assert np.allclose(w.data, [0.9, -1.9], atol=1e-6)


def test_weight_decay_only_on_matrices():
    m = Tensor(np.ones((2, 2)), requires_grad=True)
    v = Tensor(np.ones(2), requires_grad=True)
    m.grad, v.grad = np.zeros((2, 2)), np.zeros(2)
    AdamW(lr=0.1, weight_decay=0.5).step([("m", m), ("v", v)])
    assert np.allclose(m.data, 0.95) and np.array_equal(v.data, np.ones(2))


def test_frozen_params_untouched():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=False)
    a.grad = b.grad = np.ones(3)
    AdamW(lr=0.1).step([("a", a), ("b", b)])
    assert np.array_equal(b.data, np.ones(3)) and not np.array_equal(a.data, np.ones(3))


def test_nonfinite_gradient_names_parameter():
    w = Tensor(np.ones(2), requires_grad=True)
    w.grad = np.array([np.nan, 0.0])
    with checked(), pytest.raises(NumericError, match="layers.0.x"):
        AdamW().step([("layers.0.x", w)])


def test_gradient_clipping():
    w = Tensor(np.zeros(2), requires_grad=True)
    w.grad = np.array([30.0, 40.0])
    opt = AdamW(lr=0.1, grad_clip=1.0)
    opt.step([("w", w)])
    assert opt.last_grad_norm == pytest.approx(50.0)


def test_cosine_schedule():
    assert cosine_lr(0, 1.0, 1000, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(9, 1.0, 1000, warmup=10) == pytest.approx(1.0)
    assert cosine_lr(1000, 1.0, 1000, warmup=10) == pytest.approx(0.1)
    vals = [cosine_lr(s, 1.0, 1000, warmup=10) for s in range(10, 1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# ------------------------------------------------------------------- MQAR
def test_mqar_layout_and_replay():
    batch = generate_mqar(0, n_instances=50)
    for inst in batch.instances():
        pos, vals = replay_answers(inst.tokens)
        assert sorted(pos) == sorted(inst.query_positions.tolist())
        order = np.argsort(inst.query_positions)
        assert vals == inst.answers[order].tolist()
        assert inst.tokens[8] == 1 and min(inst.query_positions) >= 17
    assert np.array_equal(batch.weights.sum(1), np.full(50, 4.0))
    q = batch.query_positions
    assert np.array_equal(np.take_along_axis(batch.targets, q, 1), batch.answers)


def test_mqar_single_pair_and_determinism():
    a = generate_mqar(5, n_pairs=1, n_instances=20)
    b = generate_mqar(5, n_pairs=1, n_instances=20)
    assert np.array_equal(a.tokens, b.tokens) and a.answers.shape == (20, 1)
    assert not np.array_equal(a.tokens, generate_mqar(6, n_pairs=1, n_instances=20).tokens)


def test_mqar_infeasible_sizes_rejected():
    with pytest.raises(ValueError):
        generate_mqar(0, n_pairs=40, vocab=64)
    with pytest.raises(ValueError):
        generate_mqar(0, seq_len=20, n_pairs=4)
    with pytest.raises(ValueError):
        generate_mqar(0, n_pairs=0)


def test_untrained_model_is_near_chance():
    batch = generate_mqar(1, n_instances=200)
    acc = eval_mqar(FDM(ModelConfig(d_model=32, n_layers=1, vocab_size=64, W=8, K=4, T=64)), batch)
    assert acc < 0.1


def test_train_mqar_logs():
    seen = []
    model = AttentionBaseline(d_model=16, n_layers=1)
    cfg = MqarTrainConfig(n_train=64, n_test=20, steps=4, batch_size=4, warmup=1, eval_every=2)
    acc = train_mqar(model, cfg, log=lambda s, l, a: seen.append((s, a)))
    assert 0.0 <= acc <= 1.0
    assert [s for s, _ in seen] == [1, 2, 3, 4]
    assert seen[0][1] is None and seen[1][1] is not None


# ----------------------------------------------------------------- corpus
def test_encode_bytes():
    assert encode("ab").tolist() == [97, 98]


def test_load_corpus_split(tmp_path):
    path = tmp_path / "c.txt"
    path.write_bytes(desk_corpus_text(200_000)[:200_000])
    corpus = load_corpus(path)
    assert abs(corpus.val_fraction - 0.1) < 0.01
    assert len(corpus.train) + len(corpus.val) == 200_000
    again = load_corpus(path)
    assert np.array_equal(corpus.val, again.val)


def test_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        load_corpus(tmp_path / "nope.txt")
    (tmp_path / "e.txt").write_bytes(b"")
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "e.txt")


def test_windows_are_shifted():
    stream = np.arange(100)
    x, y = sample_windows(stream, 4, 10, np.random.default_rng(0))
    assert np.array_equal(x[:, 1:], y[:, :-1])


# ------------------------------------------------------------ train loop
def test_train_step_reduces_loss():
    model = FDM(ModelConfig(d_model=32, n_layers=1))
    x = np.tile(encode("abcabcabcabcabcab")[None], (2, 1))
    opt = AdamW(lr=1e-2)
    losses = [train_step(model, opt, lambda: model.loss(x[:, :-1], x[:, 1:])) for _ in range(15)]
    assert losses[-1] < losses[0] - 0.5


def test_parallel_grads_match_serial():
    model = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    rng = np.random.default_rng(0)
    chunks = [rng.integers(0, 258, (2, 9)) for _ in range(3)]

    def loss_fn(c):
        return model.loss(c[:, :-1], c[:, 1:])

    accumulate_grads(model, loss_fn, chunks, workers=1)
    serial = {n: t.grad.copy() for n, t in model.named_parameters()}
    accumulate_grads(model, loss_fn, chunks, workers=3)
    for n, t in model.named_parameters():
        assert np.abs(t.grad - serial[n]).max() <= 1e-10 * max(1.0, np.abs(serial[n]).max())


# ------------------------------------------------------------ freeze-scan
SHORT = dict(phase1_steps=4, phase2_steps=3, batch_size=2, seq_len=16, warmup=1, eval_every=2, eval_windows=2)


def test_freeze_scan_contract(tmp_path):
    model = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    log = run_freeze_scan(model, toy_corpus(), FreezeScanSchedule(**SHORT), log_path=tmp_path / "log.csv")
    assert log.phase_boundary == 4 and log.wave_grad_events == 0
    assert [r["phase"] for r in log.rows] == [1, 1, 1, 1, 2, 2, 2]
    with open(tmp_path / "log.csv") as fh:
        assert tuple(next(csv.reader(fh))) == LOG_FIELDS
    assert np.isfinite(log.final_val_loss())


def test_freeze_scan_keeps_wave_bitwise():
    model = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    sched = FreezeScanSchedule(**{**SHORT, "phase1_steps": 0})
    before = {n: t.data.copy() for n, t in model.named_parameters() if tag_of(n) == "wave"}
    run_freeze_scan(model, toy_corpus(), sched)
    for n, t in model.named_parameters():
        if tag_of(n) == "wave":
            assert np.array_equal(t.data, before[n]), n


def test_joint_control_arm_moves_wave():
    model = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    sched = FreezeScanSchedule(**{**SHORT, "phase1_steps": 0, "freeze_phase2": False})
    before = {n: t.data.copy() for n, t in model.named_parameters() if n.endswith("W_theta")}
    run_freeze_scan(model, toy_corpus(), sched)
    assert any(not np.array_equal(t.data, before[n]) for n, t in model.named_parameters() if n in before)


def test_resume_matches_uninterrupted(tmp_path):
    corpus = toy_corpus()
    full = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    run_freeze_scan(full, corpus, FreezeScanSchedule(**SHORT))

    part = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    sched = FreezeScanSchedule(**{**SHORT, "checkpoint_every": 1})
    ckpt = tmp_path / "ck"

    class Stop(Exception):
        pass

    calls = {"n": 0}
    orig = part.loss

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 6:
            raise Stop
        return orig(*a, **k)

    part.loss = flaky
    with pytest.raises(Stop):
        run_freeze_scan(part, corpus, sched, log_path=tmp_path / "l.csv", checkpoint_dir=ckpt)
    resumed = FDM(ModelConfig(d_model=16, n_layers=2, T=16))
    run_freeze_scan(resumed, corpus, sched, log_path=tmp_path / "l.csv", checkpoint_dir=ckpt, resume=True)
    for n, t in full.named_parameters():
        assert np.array_equal(resumed.params[n].data, t.data), n


def test_plateau_ends_phase_one_early():
    model = FDM(ModelConfig(d_model=16, n_layers=1, T=16))
    sched = FreezeScanSchedule(**{**SHORT, "phase1_steps": 40, "phase1_lr": 0.0, "patience": 1, "eval_every": 2})
    log = run_freeze_scan(model, toy_corpus(), sched)
    assert log.phase_boundary < 40


def test_initial_desk_loss_near_log_vocab():
    model = FDM(ModelConfig())
    corpus = toy_corpus()
    x, y = sample_windows(corpus.val, 4, 64, np.random.default_rng(0))
    with no_grad():
        loss = float(model.loss(x, y).data)
    assert abs(loss / np.log(258) - 1) < 0.02


def test_ab_arms_match_uninterrupted_runs(tmp_path):
    from fdm.train.freeze_scan import freeze_scan_ab

    corpus = toy_corpus()
    cfg = ModelConfig(d_model=16, n_layers=2, T=16)
    sched = FreezeScanSchedule(**SHORT)
    res = freeze_scan_ab(lambda: FDM(cfg), corpus, sched, tmp_path)
    for freeze, log in ((True, res.frozen), (False, res.joint)):
        model = FDM(cfg)
        full = run_freeze_scan(model, corpus, FreezeScanSchedule(**{**SHORT, "freeze_phase2": freeze}))
        assert full.final_val_loss() == log.final_val_loss()
        assert [r["train_loss"] for r in full.phase_rows(2)] == [r["train_loss"] for r in log.phase_rows(2)]
    assert res.frozen_wins == (res.frozen.final_val_loss() < res.joint.final_val_loss())
