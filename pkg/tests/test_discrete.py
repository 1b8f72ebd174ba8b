import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from gftlab import autodiff as ad
from gftlab.discrete import (
    P_MIN,
    ARDraws,
    EnumerationBudgetError,
    ToyJoint,
    all_sequences,
    build_toy_joint,
    cca_loss,
    cfg_ar_loss,
    cfg_logit_combine,
    cfg_model_distribution,
    draw_ar,
    draw_negatives,
    exact_model_distribution,
    gft_ar_loss,
    gft_logit_combine,
    sample_ar,
    sequence_ids,
    tilted_target_chain,
)
from gftlab.models import NULL_CLASS, ARLogitNet, ExactTableNet, TabularLogits
from gftlab.prng import Prng
from gftlab.schedules import BetaSchedule, tv_distance


@pytest.fixture(scope="module")
def joint():
    return build_toy_joint(seed=0, vocab=4, length=3, num_classes=2, skew=2.0)


def _enumerated(joint, masked_share=0.0):
    """Every (sequence, class) pair with its probability, as a weighted batch."""
    seqs = all_sequences(joint.vocab, joint.length)
    tokens = np.concatenate([seqs] * joint.num_classes)
    c = np.repeat(np.arange(joint.num_classes), seqs.shape[0])
    w = np.concatenate([joint.prior[k] * joint.sequence_probs(k) for k in range(joint.num_classes)])
    return tokens, c, w


def test_toy_joint_rows(joint):
    for table in joint.cond:
        assert np.allclose(table.sum(axis=-1), 1.0, atol=1e-12)
        assert table.min() >= P_MIN
    assert build_toy_joint(seed=0).cond[2].tobytes() == joint.cond[2].tobytes()


def test_toy_joint_flat_when_skew_vanishes():
    flat = build_toy_joint(seed=3, skew=1e-14)
    for table in flat.cond:
        assert np.allclose(table, 0.25, atol=1e-12)


def test_unconditional_chain_is_the_marginal(joint):
    mix = sum(joint.prior[k] * joint.sequence_probs(k) for k in range(joint.num_classes))
    assert np.allclose(joint.sequence_probs(None), mix, atol=1e-12, rtol=0)


def test_cfg_logit_combine_examples(joint):
    lc, lu = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.0, 0.5])
    assert np.array_equal(cfg_logit_combine(lc, lu, 0.0), lc)
    assert np.array_equal(cfg_logit_combine(lc, lc, 4.0), lc)
    chain = tilted_target_chain(joint, 1, 2.0)
    for n in range(joint.length):
        rows = softmax(cfg_logit_combine(np.log(joint.cond[n][1]), np.log(joint.uncond[n]), 2.0), axis=-1)
        assert np.allclose(rows, chain.steps[n], atol=1e-12, rtol=0)


def test_gft_logit_combine_examples():
    ls, lu = np.array([2.0, 0.0]), np.array([0.0, 0.0])
    assert np.array_equal(gft_logit_combine(ls, lu, 1.0).value, ls)
    assert np.array_equal(gft_logit_combine(ls, ls, 0.3).value, ls)
    assert np.array_equal(gft_logit_combine(ls, lu, 0.5).value, [1.0, 0.0])
    with pytest.raises(ValueError):
        gft_logit_combine(ls, lu, 0.0)


def test_gft_logit_combine_freezes_uncond_branch():
    ls, lu = ad.parameter([1.0, -1.0]), ad.parameter([0.5, 0.2])
    ad.backward(ad.sum_(gft_logit_combine(ls, lu, 0.25)))
    assert np.all(ls.grad == 0.25)
    assert lu.grad is None


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(-20, 20), st.floats(0, 5))
def test_combiners_shift_invariant(beta, k, s):
    p = Prng(1)
    ls, lu = p.normal((6, 4)), p.normal((6, 4))
    shift = k * np.arange(6)[:, None]
    a = softmax(gft_logit_combine(ls, lu, beta).value, axis=-1)
    b = softmax(gft_logit_combine(ls + shift, lu + shift, beta).value, axis=-1)
    assert np.allclose(a, b, atol=1e-12)
    a = softmax(cfg_logit_combine(ls, lu, s), axis=-1)
    b = softmax(cfg_logit_combine(ls + shift, lu + shift, s), axis=-1)
    assert np.allclose(a, b, atol=1e-12)


def test_gft_ar_equals_cfg_when_beta_is_one(joint):
    tokens, c = joint.sample(Prng(2), 64)
    net = ARLogitNet(hidden=(16,), emb_dim=8)
    draws = draw_ar(Prng(3), 64, 3, beta=1.0)
    assert gft_ar_loss(net, tokens, c, draws).value == cfg_ar_loss(net, tokens, c, draws).value


def test_optimum_net_loss_is_conditional_entropy(joint):
    tokens, c, w = _enumerated(joint)
    h = joint.conditional_entropy()
    for beta in (1.0, 0.5, 0.2):
        draws = ARDraws(np.full(tokens.shape, beta), np.zeros(tokens.shape[0], dtype=bool))
        got = float(gft_ar_loss(ExactTableNet(joint), tokens, c, draws, weights=w).value)
        assert got == pytest.approx(h, abs=1e-12)


def test_exact_conditional_cfg_loss_is_conditional_entropy(joint):
    tokens, c, w = _enumerated(joint)
    draws = ARDraws(np.ones(tokens.shape), np.zeros(tokens.shape[0], dtype=bool))
    got = float(cfg_ar_loss(ExactTableNet(joint, guided=False), tokens, c, draws, weights=w).value)
    assert got == pytest.approx(joint.conditional_entropy(), abs=1e-12)


def test_uniform_net_losses(joint):
    tokens, c = joint.sample(Prng(4), 50)
    net = TabularLogits(4, 3, 2)
    draws = draw_ar(Prng(5), 50, 3)
    assert float(gft_ar_loss(net, tokens, c, draws).value) == pytest.approx(3 * np.log(4), abs=1e-12)
    assert float(cfg_ar_loss(net, tokens, c, draws).value) == pytest.approx(3 * np.log(4), abs=1e-12)


def test_ar_losses_deterministic(joint):
    tokens, c = joint.sample(Prng(6), 32)
    a = cfg_ar_loss(ARLogitNet(hidden=(8,), emb_dim=4), tokens, c, draw_ar(Prng(7), 32, 3)).value
    b = cfg_ar_loss(ARLogitNet(hidden=(8,), emb_dim=4), tokens, c, draw_ar(Prng(7), 32, 3)).value
    assert a == b


def test_tilted_chain_examples(joint):
    assert np.allclose(tilted_target_chain(joint, 0, 0.0).sequence_probs, joint.sequence_probs(0), atol=1e-15)
    same = ToyJoint([0.5, 0.5], [np.stack([joint.cond[0][0]] * 2), np.stack([joint.cond[1][0]] * 2)])
    for s in (0.0, 1.0, 9.0):
        assert np.allclose(tilted_target_chain(same, 1, s).sequence_probs, same.sequence_probs(1), atol=1e-12)
    single = ToyJoint([0.5, 0.5], [np.array([[[0.8, 0.2]], [[0.2, 0.8]]])])
    assert np.allclose(single.uncond[0], [[0.5, 0.5]], atol=1e-15)
    assert np.allclose(tilted_target_chain(single, 0, 1.0).sequence_probs, [16 / 17, 1 / 17], atol=1e-15)
    with pytest.raises(ValueError):
        tilted_target_chain(joint, 0, -1.0)


def test_tilted_modal_probability_sharpens(joint):
    for c in range(2):
        modal = [tilted_target_chain(joint, c, s).sequence_probs.max() for s in (0, 1, 3, 9)]
        assert all(b >= a for a, b in zip(modal, modal[1:]))


def test_exact_model_distribution_examples(joint):
    p = exact_model_distribution(ARLogitNet(hidden=(8,), emb_dim=4), 1, 0.4)
    assert abs(p.sum() - 1.0) <= 1e-10
    exact = ExactTableNet(joint, guided=False)
    assert np.allclose(exact_model_distribution(exact, 0, 1.0), joint.sequence_probs(0), atol=1e-10, rtol=0)
    cfg = cfg_model_distribution(exact, 0, 1.0)
    assert np.allclose(cfg, tilted_target_chain(joint, 0, 1.0).sequence_probs, atol=1e-10, rtol=0)


def test_guided_optimum_reproduces_tilted_target(joint):
    sched = BetaSchedule("pyramid", 0.25, 1.0, 3).betas()
    got = exact_model_distribution(ExactTableNet(joint), 1, sched)
    want = tilted_target_chain(joint, 1, 1.0 / sched - 1.0).sequence_probs
    assert np.allclose(got, want, atol=1e-12, rtol=0)


def test_enumeration_budget():
    with pytest.raises(EnumerationBudgetError):
        all_sequences(10, 7)


def test_tabular_gft_optimum_matches_conditional_rows(joint):
    # full-batch population objective: every (x, c) pair plus a 10% null share
    tokens, c, w = _enumerated(joint)
    seqs = all_sequences(4, 3)
    p_x = joint.sequence_probs(None)
    tokens = np.concatenate([tokens, seqs])
    c = np.concatenate([c, np.zeros(seqs.shape[0], dtype=np.int64)])
    w = np.concatenate([0.9 * w, 0.1 * p_x])
    mask = np.arange(tokens.shape[0]) >= w.shape[0] - seqs.shape[0]
    beta = 0.4
    draws = ARDraws(np.full(tokens.shape, beta), mask)
    net = TabularLogits(4, 3, 2)
    opt = ad.Adam(list(net.params.values()), lr=0.05)
    for _ in range(3000):
        net.zero_grad()
        ad.backward(gft_ar_loss(net, tokens, c, draws, weights=w))
        opt.step()
    table = net.params["table"].value
    offsets = [0, 1, 5]
    for n in range(3):
        lu = table[-1, offsets[n]:offsets[n] + 4 ** n]
        for k in range(2):
            ls = table[k, offsets[n]:offsets[n] + 4 ** n]
            rows = softmax(beta * ls + (1 - beta) * lu, axis=-1)
            assert np.max(0.5 * np.abs(rows - joint.cond[n][k]).sum(axis=-1)) < 1e-3


def test_cca_equal_models_give_two_log_two(joint):
    tokens, c = joint.sample(Prng(8), 40)
    ref = ExactTableNet(joint, guided=False)
    c_neg = draw_negatives(Prng(9), c)
    assert float(cca_loss(ref, ref, tokens, c, c_neg, 1.0).value) == pytest.approx(2 * np.log(2), abs=1e-15)


def test_negative_conditions_come_from_other_rows():
    c = np.arange(50)
    neg = draw_negatives(Prng(10), c)
    assert np.all(neg != c)
    with pytest.raises(ValueError):
        draw_negatives(Prng(10), np.array([1]))


def _population_cca(joint, r):
    """Expected contrastive loss over positives p(x,c) and negatives p(x)p(c), r of shape (C, V^N)."""
    p_c = np.stack([joint.sequence_probs(k) for k in range(2)])
    p_x = joint.sequence_probs(None)
    pos = joint.prior[:, None] * p_c
    neg = joint.prior[:, None] * p_x[None, :]
    return ad.add(ad.sum_(ad.mul(ad.log_sigmoid(r), -pos)), ad.sum_(ad.mul(ad.log_sigmoid(ad.mul(r, -1.0)), -neg)))


def test_cca_gradient_vanishes_at_log_ratio(joint):
    p_c = np.stack([joint.sequence_probs(k) for k in range(2)])
    r = ad.parameter(np.log(p_c / joint.sequence_probs(None)))
    report = ad.finite_diff_check(lambda: _population_cca(joint, r), {"r": r})
    assert np.max(np.abs(r.grad)) < 1e-15
    assert report.max_abs_error < 1e-9


def test_sample_ar_matches_conditional(joint):
    exact = ExactTableNet(joint, guided=False)
    with ad.counting() as counts:
        x = sample_ar(exact, 1, BetaSchedule("constant", 1.0, 1.0, 3), Prng(11), n=100_000)
    assert counts.forwards == 3
    emp = np.bincount(sequence_ids(x, 4), minlength=64) / x.shape[0]
    assert tv_distance(emp, joint.sequence_probs(1)) < 0.02
    again = sample_ar(exact, 1, BetaSchedule("constant", 1.0, 1.0, 3), Prng(11), n=100_000)
    assert np.array_equal(x, again)


def test_sample_ar_cfg_mode_doubles_calls(joint):
    exact = ExactTableNet(joint, guided=False)
    with ad.counting() as counts:
        sample_ar(exact, 0, BetaSchedule("constant", 0.5, 1.0, 3), Prng(12), n=10, mode="cfg")
    assert counts.forwards == 6


def test_null_row_of_exact_net_is_unconditional(joint):
    seqs = all_sequences(4, 3)
    with ad.no_grad():
        out = ExactTableNet(joint)(seqs, np.full(64, NULL_CLASS), 0.3).value
    assert np.allclose(out[:, 0], np.log(joint.uncond[0][0]), atol=0)
