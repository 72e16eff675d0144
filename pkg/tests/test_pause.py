from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pause_lab import autograd as ag
from pause_lab.model import LengthError, ModelConfig, Transformer, build_prefix_mask
from pause_lab.pause import (
    ContaminationError,
    EmptyLossWarning,
    FinetuneExample,
    PausedSequence,
    append_pauses,
    generate_batch,
    ignore_positions,
    inject_corpus,
    pause_finetune_loss,
    pause_generate,
    pause_pretrain_loss,
    pauses_per_window,
    random_insert,
)

PAUSE = 15
CFG = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_positions=24, vocab_size=16)


def oracle_insert(tokens, m, seed):
    """Independent construction: draw gap indices, then insert one pause at a time."""
    gaps = np.random.default_rng(seed).integers(0, len(tokens) + 1, size=m)
    out = list(tokens)
    # a pause in gap g sits after g original tokens; insert from the right so earlier
    # offsets stay valid
    for g in sorted(gaps, reverse=True):
        out.insert(int(g), PAUSE)
    return out


def test_random_insert_golden():
    # frozen from the oracle above
    assert random_insert([10, 11, 12, 13], 2, 7, 99).tokens == (10, 11, 12, 99, 13, 99)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 14), max_size=30), st.integers(0, 20), st.integers(0, 2**31))
def test_random_insert_matches_oracle(tokens, m, seed):
    seq = random_insert(tokens, m, seed, PAUSE)
    assert list(seq.tokens) == oracle_insert(tokens, m, seed)
    assert seq.strip() == tokens and seq.n_pauses == m


def test_random_insert_rejects_contaminated_input():
    with pytest.raises(ContaminationError):
        random_insert([1, PAUSE, 2], 1, 0, PAUSE)


def test_ignore_set_is_positions_before_pauses():
    assert ignore_positions([1, PAUSE, PAUSE, 2, PAUSE], PAUSE) == {0, 1, 3}
    assert ignore_positions([PAUSE, 1], PAUSE) == set()


def test_paused_sequence_line_roundtrip():
    seq = PausedSequence([3, PAUSE, 4, PAUSE], PAUSE)
    line = seq.to_line()
    assert line == "3,<pause>,4,<pause>\t0,2"
    assert PausedSequence.from_line(line, PAUSE) == seq
    with pytest.raises(ValueError):
        PausedSequence.from_line("3,<pause>\t1", PAUSE)


def test_pauses_per_window():
    assert pauses_per_window(0.1, 256) == 26
    assert pauses_per_window(0.0, 256) == 0
    assert pauses_per_window(0.1, 5) == 1  # 0.5 rounds half up


def test_inject_corpus_trims_and_drops_partial_window():
    stream = np.arange(10 * 20) % 14
    seqs = list(inject_corpus(stream, 0.1, 20, 3, PAUSE, trim=True))
    assert len(seqs) == 10
    for i, s in enumerate(seqs):
        assert len(s) == 20
        kept = s.strip()
        assert kept == list(stream[i * 20 : i * 20 + len(kept)])
    assert len(list(inject_corpus(stream[:-1], 0.1, 20, 3, PAUSE))) == 9
    untrimmed = next(inject_corpus(stream, 0.1, 20, 3, PAUSE, trim=False))
    assert len(untrimmed) == 22


def test_pretrain_loss_skips_pause_targets_and_pause_inputs_still_count():
    with ag.precision("float64"):
        model = Transformer(CFG, seed=0)
        seq = PausedSequence([1, PAUSE, 2, 3], PAUSE)
        logits = model.forward(np.array(seq.tokens)).data
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        # position 0 predicts a pause (skipped); 1 -> 2 and 2 -> 3 count
        want = -(logp[1, 2] + logp[2, 3])
        assert pause_pretrain_loss(model, seq).item() == pytest.approx(want, rel=1e-12)
        assert pause_pretrain_loss(model, seq, reduction="mean").item() == pytest.approx(want / 2, rel=1e-12)


def test_all_ignored_window_warns():
    model = Transformer(CFG)
    with pytest.warns(EmptyLossWarning):
        loss = pause_pretrain_loss(model, PausedSequence([PAUSE, PAUSE, PAUSE], PAUSE))
    assert loss.item() == 0.0


def test_finetune_loss_matches_manual_gather():
    with ag.precision("float64"):
        model = Transformer(CFG, seed=1)
        ex = FinetuneExample([1, 2, 3], [4, 5, 14], m_ft=2)
        fed = [1, 2, 3, PAUSE, PAUSE, 4, 5]
        logits = model.forward(np.array(fed), build_prefix_mask(5, 7)).data
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        want = -(logp[4, 4] + logp[5, 5] + logp[6, 14])
        assert pause_finetune_loss(model, ex, PAUSE).item() == pytest.approx(want, rel=1e-12)


def test_finetune_batch_padding_does_not_change_loss():
    with ag.precision("float64"):
        model = Transformer(CFG, seed=2)
        a = FinetuneExample([1, 2], [3, 14], m_ft=1)
        b = FinetuneExample([1, 2, 3, 4, 5], [6, 7, 14], m_ft=1)
        together = pause_finetune_loss(model, [a, b], PAUSE).item()
        apart = pause_finetune_loss(model, a, PAUSE).item() + pause_finetune_loss(model, b, PAUSE).item()
        assert together == pytest.approx(apart, rel=1e-10)


def test_finetune_rejects_overlong_and_contaminated():
    model = Transformer(CFG)
    with pytest.raises(LengthError, match="example 0"):
        pause_finetune_loss(model, FinetuneExample(list(range(10)), [1, 2], m_ft=14), PAUSE)
    with pytest.raises(ContaminationError):
        pause_finetune_loss(model, FinetuneExample([1, PAUSE], [2]), PAUSE)


def test_placement():
    assert append_pauses([1, 2], 2, PAUSE, "append") == ([1, 2, PAUSE, PAUSE], 4)
    assert append_pauses([1, 2], 2, PAUSE, "prepend") == ([PAUSE, PAUSE, 1, 2], 4)
    assert append_pauses([1, 2], 0, PAUSE, "prepend") == ([1, 2], 2)


def test_generation_never_emits_pause_and_matches_single_calls():
    model = Transformer(CFG, seed=4)
    # bias the model towards the pause token so the mask matters: a constant
    # offset in the final layer norm feeds straight into the pause logit
    model.params["layers.0.ln2.beta"].data += 1.0
    model.params["unembedding"].data[:, PAUSE] += 5.0
    prefixes = [[1, 2, 3], [4, 5], [6, 7, 8]]
    batch = generate_batch(model, prefixes, 3, eos=14, pause_id=PAUSE, max_new=5)
    for p, out in zip(prefixes, batch):
        assert PAUSE not in out and len(out) <= 5
        assert out == pause_generate(model, p, 3, 14, PAUSE, max_new=5)
    unmasked = pause_generate(model, [1, 2, 3], 3, 14, PAUSE, max_new=5, mask_pause=False)
    assert PAUSE in unmasked


def test_generation_stops_at_position_limit():
    model = Transformer(CFG, seed=4)
    out = pause_generate(model, list(range(10)), 10, eos=14, pause_id=PAUSE, max_new=50)
    assert len(out) <= CFG.max_positions - 20 + 1
    with pytest.raises(LengthError):
        pause_generate(model, list(range(10)), 20, eos=14, pause_id=PAUSE)


def test_no_warning_on_normal_batches():
    model = Transformer(CFG)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pause_pretrain_loss(model, [PausedSequence([1, 2, PAUSE, 3], PAUSE)] * 2)


def test_delay_changes_answer_logits():
    from pause_lab.pause import _finetune_batch

    model = Transformer(CFG, seed=6)
    firsts = []
    for m in (0, 10):
        ex = FinetuneExample([1, 2, 3, 4], [5, 14], m_ft=m)
        tokens, allow, plens, _ = _finetune_batch([ex], PAUSE, CFG.max_positions, PAUSE)
        firsts.append(model.forward(tokens, allow).data[0, plens[0] - 1])
    assert not np.allclose(firsts[0], firsts[1])


def test_zero_pause_gradients_match_plain_cross_entropy():
    with ag.precision("float64"):
        tokens = np.array([1, 5, 2, 7, 3, 3, 9])
        grads = []
        for use_pause_loss in (True, False):
            model = Transformer(CFG, seed=3)
            if use_pause_loss:
                loss = pause_pretrain_loss(model, PausedSequence(tokens, PAUSE))
            else:
                logits = model.forward(tokens)
                loss = ag.cross_entropy(ag.take(logits, np.arange(6)), tokens[1:])
            ag.backward(loss)
            grads.append({k: t.grad.tobytes() for k, t in model.params.items()})
        assert grads[0] == grads[1]
