import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkt import numerics as nx
from lkt.dataset import SENTINEL, DktExample, LktSequence, mask_targets
from lkt.models import (DktConfig, LktConfig, alibi_slopes, attention_bias, dkt_batch_loss,
                        dkt_forward, dkt_predict, dkt_prior, init_parameters, lkt_batch_loss,
                        lkt_forward, lkt_predict, load_checkpoint, mlm_forward_loss, mlm_mask,
                        pad_batch, predict_masked_correctness, save_checkpoint)
from lkt.numerics import Tape, backward, numerical_grad
from lkt.tokenizer import CLS, CORRECT, EOS, INCORRECT, MASK, PAD

V = 20


def tiny(**kw):
    base = dict(vocab_size=V, d_model=8, num_layers=1, num_heads=2, d_ff=16, max_len=24, dropout_p=0.0)
    base.update(kw)
    return LktConfig(**base)


def randomize(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + scale * rng.normal(size=p.shape).astype(p.data.dtype)
    return model


def random_ids(rng, length):
    ids = rng.integers(7, V, size=length)
    ids[0], ids[-1] = CLS, EOS
    return ids


@pytest.fixture(autouse=True)
def float64():
    with nx.precision(np.float64):
        yield


# -- config / init ----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        LktConfig(vocab_size=10, d_model=10, num_heads=3)
    with pytest.raises(ValueError):
        LktConfig(vocab_size=10, max_len=4)
    with pytest.raises(ValueError):
        LktConfig(vocab_size=10, attention_bias="rope")


def test_init_statistics():
    m = init_parameters(LktConfig(vocab_size=200, d_model=64), seed=0)
    w = m["tok_emb"].data.ravel()
    assert w.size >= 10_000
    assert abs(w.std() - 0.02) <= 0.005
    assert np.all(np.abs(w) <= 0.04)
    assert np.all(m["layer0.ln1.gain"].data == 1.0)
    assert np.all(m["layer0.bq"].data == 0.0)
    assert np.all(m["resp.b"].data == 0.0)


def test_init_determinism():
    a, b = init_parameters(tiny(), 3), init_parameters(tiny(), 3)
    c = init_parameters(tiny(), 4)
    for k in a.params:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert not np.array_equal(a["tok_emb"].data, c["tok_emb"].data)


def test_alibi_slopes():
    np.testing.assert_allclose(alibi_slopes(4), [0.5, 0.125, 0.03125, 0.0])
    bias = attention_bias(tiny(num_heads=2), 3)
    np.testing.assert_allclose(bias[0], -0.5 * np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]]))
    assert np.all(bias[1] == 0)
    assert np.all(attention_bias(tiny(attention_bias="none"), 3) == 0)


# -- forward ----------------------------------------------------------------------

def test_padding_gets_no_attention():
    m = randomize(init_parameters(tiny(), 0))
    ids = np.full((1, 12), PAD)
    ids[0, :5] = random_ids(np.random.default_rng(0), 5)
    out = lkt_forward(m, ids, keep_attention=True)
    att = out.attentions[0]
    assert np.all(att[0, :, :5, 5:] == 0.0)
    np.testing.assert_allclose(att[0, :, :5, :5].sum(-1), 1.0, atol=1e-12)


def test_identical_rows_identical_logits():
    m = randomize(init_parameters(tiny(), 0))
    ids = random_ids(np.random.default_rng(1), 9)
    logits = lkt_forward(m, np.stack([ids, ids])).logits.data
    np.testing.assert_array_equal(logits[0], logits[1])


def test_minimal_sequence_shapes():
    m = init_parameters(tiny(), 0)
    out = lkt_forward(m, [[CLS, EOS]])
    assert out.logits.shape == (1, 2)
    m = init_parameters(tiny(head_type="mlm"), 0)
    assert lkt_forward(m, [[CLS, EOS]]).logits.shape == (1, 2, V)


def test_too_long():
    m = init_parameters(tiny(), 0)
    with pytest.raises(ValueError, match="max_len"):
        lkt_forward(m, np.full((1, 25), 7))


def make_seq(rng, n):
    ids, pos = [CLS], []
    labels = rng.integers(0, 2, n)
    for y in labels:
        ids += list(rng.integers(7, V, size=2)) + [CORRECT if y else INCORRECT]
        pos.append(len(ids) - 1)
    ids.append(EOS)
    return LktSequence(np.array(ids), np.array(pos), labels)


def test_zero_head_gives_half():
    m = randomize(init_parameters(tiny(), 0))
    m["resp.w"].data[:] = 0
    m["resp.b"].data[:] = 0
    ex = mask_targets(make_seq(np.random.default_rng(0), 4), [0, 2])
    _, probs = lkt_batch_loss(m, [ex])
    np.testing.assert_array_equal(probs.data, [0.5, 0.5])


def test_predict_requires_mask_token():
    m = init_parameters(tiny(), 0)
    ex = mask_targets(make_seq(np.random.default_rng(0), 3), [1])
    out = lkt_forward(m, ex.token_ids[None])
    with pytest.raises(ValueError, match="MASK"):
        predict_masked_correctness(out, [0], [ex.response_positions[0]])


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(0)
    m = randomize(init_parameters(tiny(), 0))
    exs = [mask_targets(make_seq(rng, n), [0]) for n in (2, 4, 3)]
    _, p = lkt_batch_loss(m, exs)
    _, q = lkt_batch_loss(m, exs[::-1])
    np.testing.assert_allclose(p.data, q.data[::-1], atol=1e-12)
    assert np.all((p.data > 0) & (p.data < 1))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 1000), st.integers(1, 6))
def test_pad_content_invariance(n, seed, extra):
    # whatever sits in padded slots must not change any prediction
    rng = np.random.default_rng(seed)
    m = randomize(init_parameters(tiny(), seed % 7), seed)
    ex = mask_targets(make_seq(rng, n), [n - 1])
    L = len(ex.token_ids)
    a = np.concatenate([ex.token_ids, np.full(extra, PAD)])
    out_a = lkt_forward(m, a[None])
    out_b = lkt_forward(m, np.concatenate([ex.token_ids, np.full(extra, PAD)])[None])
    # corrupt pad embedding and the pad positions' embeddings
    m2 = m.copy()
    m2["tok_emb"].data[PAD] += rng.normal(size=8)
    out_c = lkt_forward(m2, a[None])
    pos = [ex.mask_positions[0]]
    pa = predict_masked_correctness(out_a, [0], pos).data
    pc = predict_masked_correctness(out_c, [0], pos).data
    np.testing.assert_allclose(pa, pc, atol=1e-12)
    short = predict_masked_correctness(lkt_forward(m, ex.token_ids[None]), [0], pos).data
    np.testing.assert_allclose(pa, short, atol=1e-12)
    assert L + extra == out_b.token_ids.shape[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(0, 1000), st.sampled_from(["alibi", "none"]))
def test_attention_rows_are_distributions(length, seed, bias):
    rng = np.random.default_rng(seed)
    m = randomize(init_parameters(tiny(attention_bias=bias), seed % 5), seed, scale=1.0)
    ids = random_ids(rng, length)
    out = lkt_forward(m, np.stack([ids, np.concatenate([ids[: length // 2 + 1], np.full(length - length // 2 - 1, PAD)])]),
                      keep_attention=True)
    for att in out.attentions:
        assert np.all(att >= 0)
        np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-5)


def test_forward_is_pure_without_dropout():
    m = randomize(init_parameters(tiny(dropout_p=0.3), 0))
    ids = random_ids(np.random.default_rng(0), 10)[None]
    a = lkt_forward(m, ids).hidden.data
    b = lkt_forward(m, ids).hidden.data
    np.testing.assert_array_equal(a, b)
    c = lkt_forward(m, ids, training=True, rng=np.random.default_rng(0)).hidden.data
    assert not np.array_equal(a, c)


def test_end_to_end_gradient():
    rng = np.random.default_rng(0)
    m = randomize(init_parameters(tiny(), 0), 0, scale=0.2)
    exs = [mask_targets(make_seq(rng, 3), [0, 2]), mask_targets(make_seq(rng, 2), [1])]
    with Tape() as tape:
        loss, _ = lkt_batch_loss(m, exs)
    backward(tape, loss)
    for name, p in m.params.items():
        if name.startswith("mlm."):
            continue
        num = numerical_grad(lambda: lkt_batch_loss(m, exs)[0].item(), p, h=1e-5)
        err = np.abs(p.grad - num) / np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), 1e-6)
        assert err.max() <= 1e-4, name


def test_lkt_predict_scores_every_interaction():
    rng = np.random.default_rng(0)
    m = randomize(init_parameters(tiny(), 0))
    seqs = [make_seq(rng, 3), make_seq(rng, 5)]
    scores, labels, owners = lkt_predict(m, seqs, batch_size=3)
    assert len(scores) == 8
    assert owners.tolist() == [0] * 3 + [1] * 5
    np.testing.assert_array_equal(labels, np.concatenate([s.labels for s in seqs]))


# -- MLM --------------------------------------------------------------------------

def test_mlm_uniform_is_log_v():
    m = randomize(init_parameters(tiny(head_type="mlm"), 0))
    m["mlm.w"].data[:] = 0
    m["mlm.b"].data[:] = 0
    ids = random_ids(np.random.default_rng(0), 8)[None]
    loss = mlm_forward_loss(m, ids, ([0, 0], [2, 4]), [ids[0, 2], ids[0, 4]])
    assert loss.item() == pytest.approx(math.log(V))


def test_mlm_confident_is_near_zero():
    m = init_parameters(tiny(head_type="mlm"), 0)
    m["mlm.w"].data[:] = 0
    m["mlm.b"].data[:] = 0
    m["mlm.b"].data[9] = 50.0
    loss = mlm_forward_loss(m, [[CLS, 9, 9, EOS]], ([0], [1]), [9])
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_mlm_needs_positions():
    m = init_parameters(tiny(head_type="mlm"), 0)
    with pytest.raises(ValueError):
        mlm_forward_loss(m, [[CLS, 9, EOS]], ([], []), [])


def test_mlm_mask_split():
    rng = np.random.default_rng(0)
    ids = np.concatenate([[CLS], rng.integers(7, V, 20_000), [EOS]])
    out, pos, tgt = mlm_mask(ids, rng, 0.15, V)
    assert abs(len(pos) / 20_000 - 0.15) < 0.01
    np.testing.assert_array_equal(tgt, ids[pos])
    frac_mask = np.mean(out[pos] == MASK)
    assert abs(frac_mask - 0.8) < 0.02
    assert out[0] == CLS and out[-1] == EOS


def test_mlm_loss_decreases():
    # 100 toy sentences, 50 Adam steps: loss must drop below 0.8 x the first loss
    from lkt.training import AdamState, adam_step

    with nx.precision(np.float32):
        rng = np.random.default_rng(0)
        words = np.arange(7, V)
        corpus = []
        for _ in range(100):
            start = rng.integers(len(words))
            body = [words[(start + k) % len(words)] for k in range(6)]
            corpus.append(np.array([CLS] + body + [EOS]))
        m = init_parameters(tiny(head_type="mlm", d_model=16, d_ff=32), 0)
        params = m.parameters()
        state = AdamState.init(params)
        losses = []
        for step in range(50):
            batch = [corpus[i] for i in rng.choice(100, 16, replace=False)]
            items = [mlm_mask(s, rng, 0.15, V) for s in batch]
            ids = pad_batch([it[0] for it in items])
            bidx = np.concatenate([np.full(len(it[1]), i) for i, it in enumerate(items)])
            pos = np.concatenate([it[1] for it in items])
            tgt = np.concatenate([it[2] for it in items])
            m.zero_grad()
            with Tape() as tape:
                loss = mlm_forward_loss(m, ids, (bidx, pos), tgt)
            backward(tape, loss)
            adam_step(params, [p.grad for p in params], state, 3e-3)
            losses.append(loss.item())
    assert losses[0] == pytest.approx(math.log(V), rel=0.05)
    assert np.mean(losses[-5:]) <= 0.8 * losses[0]


# -- DKT --------------------------------------------------------------------------

def dkt_model(q=5, hidden=6, seed=0):
    return randomize(init_parameters(DktConfig(q, hidden), seed), seed, scale=0.5)


def test_dkt_first_step_ignores_inputs():
    m = dkt_model()
    a = dkt_forward(m, DktExample(np.array([0, 1, 2]), np.array([1, 0, 1]))).data
    b = dkt_forward(m, DktExample(np.array([4, 3, 3]), np.array([0, 0, 0]))).data
    np.testing.assert_array_equal(a[0, 0], b[0, 0])
    assert not np.allclose(a[0, 1], b[0, 1])


def test_dkt_sentinel_only_is_constant():
    m = dkt_model()
    out = dkt_forward(m, DktExample(np.full(4, SENTINEL), np.array([1, 0, 1, 1]))).data
    for t in range(1, 4):
        np.testing.assert_allclose(out[0, t], out[0, 0], atol=1e-12)


def test_dkt_prior_on_unseen():
    m = dkt_model()
    scores, _, _ = dkt_predict(m, [DktExample(np.array([SENTINEL, 2, SENTINEL]), np.array([1, 0, 1]))])
    assert scores[0] == scores[2] == dkt_prior(m)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 1000), st.data())
def test_dkt_causality(steps, seed, data):
    rng = np.random.default_rng(seed)
    m = dkt_model(seed=seed % 4)
    q = rng.integers(0, 5, steps)
    r = rng.integers(0, 2, steps)
    t = data.draw(st.integers(0, steps - 1))
    q2, r2 = q.copy(), r.copy()
    q2[t] = (q[t] + 1) % 5
    r2[t] = 1 - r[t]
    a = dkt_forward(m, DktExample(q, r)).data
    b = dkt_forward(m, DktExample(q2, r2)).data
    np.testing.assert_array_equal(a[0, : t + 1], b[0, : t + 1])


def test_dkt_gradient_four_steps():
    m = dkt_model(q=3, hidden=4)
    exs = [DktExample(np.array([0, 2, 1, 2]), np.array([1, 0, 0, 1]))]
    with Tape() as tape:
        loss, _ = dkt_batch_loss(m, exs)
    backward(tape, loss)
    for name, p in m.params.items():
        num = numerical_grad(lambda: dkt_batch_loss(m, exs)[0].item(), p, h=1e-5)
        err = np.abs(p.grad - num) / np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), 1e-6)
        assert err.max() <= 1e-4, name


def test_dkt_empty_sequence():
    with pytest.raises(ValueError):
        dkt_forward(dkt_model(), DktExample(np.zeros(0, int), np.zeros(0, int)))


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = randomize(init_parameters(tiny(attention_bias="none", dropout_p=0.2), 0))
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config
    for k in m.params:
        np.testing.assert_array_equal(back[k].data, m[k].data.astype(np.float32))
    d = dkt_model()
    save_checkpoint(d, tmp_path / "d.ckpt")
    assert load_checkpoint(tmp_path / "d.ckpt").config == d.config


def test_checkpoint_truncated(tmp_path):
    m = init_parameters(tiny(), 0)
    save_checkpoint(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk.ckpt")
