from __future__ import annotations

import numpy as np
import pytest

from pause_lab import autograd as ag
from pause_lab.autograd import NonFiniteError, Tensor
from pause_lab.model import ModelConfig, Transformer
from pause_lab.pause import FinetuneExample
from pause_lab.trainer import (
    BudgetError,
    CompatibilityError,
    CorruptionError,
    FormatError,
    OptimizerState,
    TrainConfig,
    adam_step,
    index_stream,
    load_checkpoint,
    lr_schedule,
    make_header,
    save_checkpoint,
    train_finetune,
    train_pretrain,
    write_curve,
)

PAUSE = 15
CFG = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_positions=16, vocab_size=16)


def test_lr_schedule_warmup_then_constant():
    cfg = TrainConfig(learning_rate=1e-3, warmup_steps=10, total_steps=100)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(5, cfg) == pytest.approx(5e-4)
    assert lr_schedule(10, cfg) == lr_schedule(99, cfg) == 1e-3
    cos = TrainConfig(learning_rate=1e-3, warmup_steps=10, total_steps=100, schedule="cosine")
    assert lr_schedule(100, cos) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=5)


def test_adam_first_step_is_lr_times_sign():
    # with bias correction the first update is lr * g / (|g| + eps)
    with ag.precision("float64"):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad[:] = [0.5, -0.1, 0.0]
        cfg = TrainConfig(grad_clip_norm=None)
        adam_step({"p": p}, OptimizerState(), 0.01, cfg)
        np.testing.assert_allclose(p.data, [0.99, -1.99, 3.0], atol=1e-6)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    with ag.precision("float64"):
        p = Tensor(rng.normal(size=4), requires_grad=True)
        ref, m, v = p.data.copy(), np.zeros(4), np.zeros(4)
        cfg = TrainConfig(grad_clip_norm=None)
        state = OptimizerState()
        for t in range(1, 6):
            g = rng.normal(size=4)
            p.grad[:] = g
            adam_step({"p": p}, state, 1e-2, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_clipping_scales_to_global_norm():
    with ag.precision("float64"):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad[:] = [30.0, 40.0]
        state = OptimizerState()
        norm = adam_step({"a": a}, state, 0.0, TrainConfig(grad_clip_norm=1.0))
        assert norm == pytest.approx(50.0)
        np.testing.assert_allclose(state.m["a"], 0.1 * np.array([0.6, 0.8]))


def test_nan_gradient_aborts_before_update():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad[1] = np.nan
    state = OptimizerState()
    with pytest.raises(NonFiniteError) as err:
        adam_step({"p": p}, state, 0.1, TrainConfig())
    assert err.value.diagnostics["tensors"] == ["p"]
    assert np.all(p.data == 1) and state.step == 0


def test_index_stream_covers_each_epoch():
    it = index_stream(5, 3)
    first, second = [next(it) for _ in range(5)], [next(it) for _ in range(5)]
    assert sorted(first) == sorted(second) == list(range(5))


def test_pretrain_is_deterministic_and_reduces_loss():
    corpus = np.tile(np.arange(8), 200)
    cfg = TrainConfig(learning_rate=1e-2, warmup_steps=5, total_steps=40, batch_size=2)
    runs = []
    for _ in range(2):
        model = Transformer(CFG, seed=0)
        result = train_pretrain(model, corpus, cfg, "standard", 16, PAUSE)
        runs.append((result.losses, model.params.digest()))
    assert runs[0] == runs[1]
    losses = runs[0][0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert result.tokens_seen == 40 * 2 * 16


def test_pretrain_budget_error():
    cfg = TrainConfig(warmup_steps=0, total_steps=10, batch_size=2)
    with pytest.raises(BudgetError):
        train_pretrain(Transformer(CFG), np.zeros(100, np.int64), cfg, "standard", 16, PAUSE)


def test_finetune_learns_a_constant_answer():
    examples = [FinetuneExample([i % 10, 11], [12, 14], m_ft=2) for i in range(20)]
    model = Transformer(CFG, seed=1)
    cfg = TrainConfig(learning_rate=1e-2, warmup_steps=5, total_steps=60, batch_size=4)
    result = train_finetune(model, examples, cfg, PAUSE)
    assert result.losses[-1] < 0.1 < result.losses[0]


def test_finetune_rejects_mixed_delays():
    examples = [FinetuneExample([1], [2], m_ft=1), FinetuneExample([1], [2], m_ft=2)]
    with pytest.raises(ValueError):
        train_finetune(Transformer(CFG), examples, TrainConfig(warmup_steps=0, total_steps=1), PAUSE)


def test_checkpoint_roundtrip_and_errors(tmp_path):
    model = Transformer(CFG, seed=3)
    path = tmp_path / "m.ckpt"
    header = make_header(CFG, TrainConfig(), 1234, 7, stage="test")
    save_checkpoint(path, model.params, header)
    ckpt = load_checkpoint(path, expected=CFG)
    assert ckpt.header == header
    for name, t in model.params.items():
        assert ckpt.tensors[name].tobytes() == t.data.astype("<f4").tobytes()
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, expected=ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, max_positions=16, vocab_size=16))
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"X" + raw[1:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.ckpt")


def test_write_curve(tmp_path):
    model = Transformer(CFG)
    result = train_pretrain(model, np.arange(64) % 8, TrainConfig(warmup_steps=0, total_steps=2, batch_size=2), "standard", 16, PAUSE)
    write_curve(tmp_path / "c.csv", result.curve)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr,tokens_seen" and len(lines) == 3


def test_lookup_loss_curve_decreases():
    from pause_lab.tasks import TaskSpec, build_vocab, gen_task_examples

    vocab = build_vocab(["lookup"])
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, max_positions=64, vocab_size=len(vocab))
    raw = gen_task_examples(TaskSpec("lookup", 2, "train", 0), 200)
    examples = [FinetuneExample(vocab.encode(p), vocab.encode(t) + [vocab.eos_id]) for p, t in raw]
    result = train_finetune(Transformer(cfg, seed=0), examples, TrainConfig(learning_rate=1e-3, warmup_steps=20, total_steps=200, batch_size=8), vocab.pause_id)
    q = len(result.losses) // 4
    assert np.mean(result.losses[-q:]) < np.mean(result.losses[:q])
