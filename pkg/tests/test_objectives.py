from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from managertower import ContractError, CrossModalState, Rng, Tensor
from managertower import tensor as T
from managertower.encoders import BOS, EOS, MASK, PAD
from managertower.objectives import (ITCHead, ITMHead, MaskPlan, MLMHead, MultiLabelHead, PairBatch,
                                     apply_mask, hard_negative_probs, itc_loss, itc_similarity,
                                     itm_loss, itm_pool_and_logits, l2_normalize, mlm_loss,
                                     multilabel_loss, sample_hard_negatives)

from conftest import ln_np

VOCAB = 14


def caption_batch(rng, b=4, length=10):
    ids = rng.integers(4, VOCAB, size=(b, length))
    ids[:, 0] = BOS
    ids[:, -3] = EOS
    ids[:, -2:] = PAD
    return ids


# ---------------------------------------------------------------- masking

def test_mask_ratio_zero_and_one(rng):
    ids = caption_batch(rng)
    out, plan = apply_mask(ids, 0.0, rng, VOCAB)
    assert len(plan) == 0
    np.testing.assert_array_equal(out, ids)
    out, plan = apply_mask(ids, 1.0, rng.child("all"), VOCAB)
    maskable = ~np.isin(ids, (PAD, BOS, EOS, MASK))
    assert len(plan) == maskable.sum()
    assert set(zip(plan.rows.tolist(), plan.cols.tolist())) == set(zip(*np.nonzero(maskable)))
    np.testing.assert_array_equal(plan.original, ids[plan.rows, plan.cols])


def test_mask_fraction_monte_carlo():
    r = Rng(2024)
    ids = caption_batch(r, b=10_000)
    out, plan = apply_mask(ids, 0.15, r.child("m"), VOCAB)
    frac = len(plan) / (~np.isin(ids, (PAD, BOS, EOS, MASK))).sum()
    assert abs(frac - 0.15) < 0.01
    filled = out[plan.rows, plan.cols]
    p_mask = np.mean(filled == MASK)
    p_keep = np.mean(filled == plan.original)
    assert abs(p_mask - 0.8) < 0.01
    # a random fill may coincide with the original token
    assert abs(p_keep - (0.1 + 0.1 / (VOCAB - 4))) < 0.01


def test_mask_never_touches_specials(rng):
    ids = caption_batch(rng, b=200)
    out, plan = apply_mask(ids, 0.9, rng, VOCAB)
    special = np.isin(ids, (PAD, BOS, EOS))
    np.testing.assert_array_equal(out[special], ids[special])
    assert not np.isin(plan.original, (PAD, BOS, EOS, MASK)).any()
    assert np.all(out[~special] >= 3)


def test_mask_single_sequence_and_bad_ratio(rng):
    seq = np.array([BOS, 5, 6, 7, EOS])
    out, plan = apply_mask(seq, 1.0, rng, VOCAB)
    assert out.shape == seq.shape and plan.cols.tolist() == [1, 2, 3]
    with pytest.raises(ContractError):
        apply_mask(seq, 1.5, rng, VOCAB)


# ---------------------------------------------------------------- MLM

def _state(rng, b=2, lv=5, lt=6, d=8):
    return CrossModalState([Tensor(rng.normal(size=(b, lv, d)))], [Tensor(rng.normal(size=(b, lt, d)))])


def test_mlm_confident_and_uniform(rng):
    d, vocab = 8, 32
    table = Tensor(rng.normal(size=(vocab, d)), requires_grad=True)
    head = MLMHead(d, d, table, rng)
    state = _state(rng)
    plan = MaskPlan(np.array([0, 1, 1]), np.array([2, 1, 4]), np.array([7, 30, 4]))
    table.data[...] = 0
    assert abs(mlm_loss(state, plan, head).item() - math.log(32)) < 1e-12
    head.decoder_bias.data[...] = 0
    head.decoder_bias.data[[7, 30, 4]] = 0   # confident case via bias on each target in turn
    for r, c, tgt in zip(plan.rows, plan.cols, plan.original):
        head.decoder_bias.data[...] = 0
        head.decoder_bias.data[tgt] = 1e6
        one = MaskPlan(np.array([r]), np.array([c]), np.array([tgt]))
        assert mlm_loss(state, one, head).item() < 1e-12


def test_mlm_matches_composed_oracle(rng):
    d, uni, vocab = 8, 6, 12
    table = Tensor(rng.normal(size=(vocab, uni)), requires_grad=True)
    head = MLMHead(d, uni, table, rng)
    for p in head.parameters():
        p.data[...] = p.data + rng.child(id(p) % 97).normal(0, 0.3, size=p.shape)
    state = _state(rng, d=d)
    plan = MaskPlan(np.array([0, 1]), np.array([3, 0]), np.array([5, 11]))
    h = state.t_top.data[plan.rows, plan.cols] @ head.dense.weight.data + head.dense.bias.data
    h = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h ** 3)))
    h = ln_np(h) * head.ln.gain.data + head.ln.bias.data
    logits = h @ table.data.T + head.decoder_bias.data
    lse = np.log(np.exp(logits).sum(1))
    ref = np.mean(lse - logits[[0, 1], plan.original])
    assert abs(mlm_loss(state, plan, head).item() - ref) < 1e-12


def test_mlm_empty_plan_warns_and_is_zero(rng):
    head = MLMHead(8, 8, Tensor(rng.normal(size=(10, 8)), requires_grad=True), rng)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert mlm_loss(_state(rng), MaskPlan.empty(), head).item() == 0.0
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


# ---------------------------------------------------------------- ITM

def test_itm_zero_head_and_slot_zero_locality(rng):
    head = ITMHead(8, rng)
    state = _state(rng)
    for p in head.parameters():
        p.data[...] = 0
    np.testing.assert_array_equal(itm_pool_and_logits(state, head).data, 0.0)
    head = ITMHead(8, rng.child("h"))
    a = itm_pool_and_logits(state, head).data
    state.cv[-1].data[:, 1:] += 5.0
    state.ct[-1].data[:, 1:] -= 3.0
    np.testing.assert_array_equal(itm_pool_and_logits(state, head).data, a)


def test_itm_pipeline_oracle(rng):
    head = ITMHead(8, rng)
    for i, p in enumerate(head.parameters()):
        p.data[...] = rng.child(i).normal(0, 0.5, size=p.shape)
    state = _state(rng)
    pv = np.tanh(state.v_top.data[:, 0] @ head.pool_v.weight.data + head.pool_v.bias.data)
    pt = np.tanh(state.t_top.data[:, 0] @ head.pool_t.weight.data + head.pool_t.bias.data)
    ref = np.concatenate([pv, pt], -1) @ head.classifier.weight.data + head.classifier.bias.data
    np.testing.assert_allclose(itm_pool_and_logits(state, head).data, ref, atol=1e-14)


def test_itm_untrained_head_loss_is_ln2():
    r = Rng(77)
    head = ITMHead(16, r.child("head"))
    losses = []
    for k in range(1000):
        rk = r.child("batch", k)
        state = _state(rk, b=8, d=16)
        labels = rk.permutation(np.repeat([0, 1], 4))
        losses.append(itm_loss(itm_pool_and_logits(state, head), labels).item())
    assert abs(np.mean(losses) - math.log(2)) < 0.05


# ---------------------------------------------------------------- ITC

def _identity_itc(d, rng):
    head = ITCHead(d, d, rng)
    for lin in (head.proj_v, head.proj_t):
        lin.weight.data[...] = np.eye(d)
        lin.bias.data[...] = 0
    return head


def test_itc_similarity_examples(rng):
    head = _identity_itc(4, rng)
    x = l2_normalize(Tensor(rng.normal(size=(3, 4)))).data
    sim = itc_similarity(x, x, head).data
    np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-12)
    eye = np.eye(4)[:3] * np.array([[2.0], [0.5], [3.0]])
    sim = itc_similarity(eye, eye, head).data
    np.testing.assert_allclose(sim, np.eye(3), atol=1e-12)


def test_itc_similarity_loop_oracle(rng):
    head = ITCHead(6, 4, rng)
    v, t = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    zv = v @ head.proj_v.weight.data + head.proj_v.bias.data
    zt = t @ head.proj_t.weight.data + head.proj_t.bias.data
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ref[i, j] = zv[i] @ zt[j] / (np.linalg.norm(zv[i]) * np.linalg.norm(zt[j]))
    np.testing.assert_allclose(itc_similarity(v, t, head).data, ref, atol=1e-12)


def test_itc_head_defaults():
    head = ITCHead(32, 16, Rng(0))
    assert abs(head.temperature().item() - 0.07) < 1e-15
    assert head.proj_v.weight.shape == (32, 16)


def test_itc_loss_examples(rng):
    assert itc_loss(1e3 * np.eye(5)).item() < 1e-12
    assert abs(itc_loss(np.zeros((4, 4))).item() - math.log(4)) < 1e-15
    s, tau = rng.normal(size=(5, 5)), 0.3

    def ce_rows(m):
        return np.mean(np.log(np.exp(m).sum(1)) - np.diag(m))

    ref = 0.5 * (ce_rows(s / tau) + ce_rows((s / tau).T))
    assert abs(itc_loss(s, tau).item() - ref) < 1e-12
    with pytest.raises(ContractError):
        itc_loss(np.zeros((1, 1)))


@given(st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_itc_loss_permutation_invariant(b, seed):
    r = Rng(seed)
    s = r.normal(size=(b, b))
    p = r.permutation(b)
    assert abs(itc_loss(s).item() - itc_loss(s[p][:, p]).item()) < 1e-12


# ---------------------------------------------------------------- hard negatives

def test_hard_negatives_forced_and_errors(rng):
    for k in range(20):
        np.testing.assert_array_equal(sample_hard_negatives(rng.normal(size=(2, 2)), rng.child(k)), [1, 0])
    with pytest.raises(ContractError):
        sample_hard_negatives(np.zeros((1, 1)), rng)


def test_hard_negatives_frequencies(rng):
    b, draws = 4, 10_000
    sim = rng.normal(size=(b, b)) * 2
    probs = hard_negative_probs(sim)
    np.testing.assert_allclose(np.diag(probs), 0.0)
    counts = np.zeros((b, b))
    for k in range(draws):
        picks = sample_hard_negatives(sim, rng.child(k))
        counts[np.arange(b), picks] += 1
    assert np.all(np.diag(counts) == 0)
    sd = np.sqrt(draws * probs * (1 - probs))
    assert np.all(np.abs(counts - draws * probs) <= 3 * sd + 1e-9)
    off = ~np.eye(b, dtype=bool)
    e = np.exp(sim - sim.max())
    e[~off] = 0
    np.testing.assert_allclose(probs, e / e.sum(1, keepdims=True), atol=1e-12)


# ---------------------------------------------------------------- multi-label and batches

def test_multilabel_head_bce(rng):
    head = MultiLabelHead(8, 5, rng)
    state = _state(rng)
    logits = head(state)
    assert logits.shape == (2, 5)
    targets = np.array([[1, 0, 0, 1, 0], [0, 0, 1, 0, 0]], float)
    x = logits.data
    ref = -np.mean(targets * np.log(1 / (1 + np.exp(-x))) + (1 - targets) * np.log(1 - 1 / (1 + np.exp(-x))))
    assert abs(multilabel_loss(logits, targets).item() - ref) < 1e-12


def test_pair_batch_labels_validated():
    with pytest.raises(ContractError):
        PairBatch(np.zeros((1, 2, 3)), np.zeros((1, 4), int), np.ones((1, 4), bool), np.array([2]))


def test_hard_negatives_respect_exclusions(rng):
    sim = rng.normal(size=(4, 4))
    exclude = np.zeros((4, 4), dtype=bool)
    exclude[0, 1] = exclude[2, 3] = True
    probs = hard_negative_probs(sim, exclude)
    assert probs[0, 1] == 0.0 and probs[2, 3] == 0.0
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    for k in range(200):
        picks = sample_hard_negatives(sim, rng.child(k), exclude)
        assert picks[0] != 1 and picks[2] != 3 and np.all(picks != np.arange(4))
    exclude[1] = [False, False, True, True]
    exclude[1, 0] = True
    with pytest.raises(ContractError):
        hard_negative_probs(sim, exclude)
