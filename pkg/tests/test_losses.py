import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcegzsl import gradcheck
from pcegzsl.losses import (
    ContrastiveVariant,
    LossComponents,
    LossWeights,
    MarginPair,
    alpha_neg,
    alpha_pos,
    center_semantic_loss,
    critic_loss,
    gradient_penalty,
    proto_contrastive_loss,
    sample_semantic_loss,
    semantic_loss,
    total_loss,
    wgan_losses,
)
from pcegzsl.models import Mlp, MlpSpec
from pcegzsl.ndcore import Param, Rng, l2_normalize_rows

from oracles import brute_proto_loss

V = ContrastiveVariant
M04 = MarginPair.from_margin(0.4)


def _unit(rng, shape):
    return l2_normalize_rows(rng.normal(shape))[0]


def _batch(seed, n_cls=4, batch=8, dz=5):
    rng = Rng(seed)
    labels = np.concatenate([np.arange(n_cls), (rng.uniform(batch - n_cls) * n_cls).astype(int)])
    return _unit(rng, (n_cls, dz)), _unit(rng, (batch, dz)), labels


def test_alpha_examples():
    assert alpha_pos(0.5, 0.4) == pytest.approx(0.9)
    assert alpha_pos(1.5, 0.4) == 0.0
    assert alpha_neg(0.1, 0.4) == pytest.approx(0.5)
    assert alpha_neg(-0.9, 0.4) == 0.0


def test_margin_pair():
    assert MarginPair.from_margin(0.25) == MarginPair(0.25, 0.75)


def test_plain_symmetric_is_ln2():
    r = 1 / math.sqrt(2)
    protos = np.array([[r, r], [r, r]])
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, _, _ = proto_contrastive_loss(protos, z, [0, 1], 80.0, V.PLAIN)
    assert abs(loss - math.log(2)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_adaptive_zero_alpha_is_ln2(seed):
    p, z, y = _batch(seed, n_cls=2, batch=2)
    loss, gp, gz = proto_contrastive_loss(p, z, y, 80.0, V.ADAPTIVE, M04, force_alpha=0.0)
    assert abs(loss - math.log(2)) <= 1e-12
    assert not gp.any() and not gz.any()


def test_adaptive_zero_alpha_counts_pairs():
    # every exponent vanishes, leaving log(1 + |P| |N|) per prototype
    p, z, y = _batch(1, n_cls=3, batch=7)
    loss = proto_contrastive_loss(p, z, y, 80.0, V.ADAPTIVE, M04, force_alpha=0.0)[0]
    counts = np.bincount(y, minlength=3)
    expect = np.mean([math.log1p(c * (len(y) - c)) for c in counts])
    assert loss == pytest.approx(expect, abs=1e-12)


def test_plain_orthogonal_anchor():
    eye = np.eye(2)
    loss, _, _ = proto_contrastive_loss(eye, eye, [0, 1], 0.8, V.PLAIN)
    assert loss == pytest.approx(0.371101, abs=1e-6)
    assert loss == pytest.approx(math.log1p(math.exp(-0.8)), abs=1e-15)


@pytest.mark.parametrize("seed", range(50))
def test_reduction_chain(seed):
    p, z, y = _batch(seed)
    margin = proto_contrastive_loss(p, z, y, 30.0, V.MARGIN, M04)
    adaptive_one = proto_contrastive_loss(p, z, y, 30.0, V.ADAPTIVE, M04, force_alpha=1.0)
    margin_zero = proto_contrastive_loss(p, z, y, 30.0, V.MARGIN, MarginPair(0.0, 0.0))
    plain = proto_contrastive_loss(p, z, y, 30.0, V.PLAIN)
    for a, b in ((adaptive_one, margin), (margin_zero, plain)):
        assert abs(a[0] - b[0]) <= 1e-12
        np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-12)
        np.testing.assert_allclose(a[2], b[2], rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", ["plain", "margin", "adaptive"])
@pytest.mark.parametrize("seed", range(50))
def test_proto_loss_matches_brute_force(seed, variant):
    p, z, y = _batch(seed, n_cls=3, batch=6)
    loss, _, _ = proto_contrastive_loss(p, z, y, 5.0, variant, M04)
    dn, dm = (0.0, 0.0) if variant == "plain" else (0.4, 0.6)
    assert loss == pytest.approx(brute_proto_loss(p, z, y, 5.0, variant, dn, dm), rel=1e-12, abs=1e-12)


def test_proto_loss_large_gamma_finite():
    p, z, y = _batch(3)
    loss, gp, gz = proto_contrastive_loss(p, z, y, 1e4, V.PLAIN)
    assert math.isfinite(loss) and np.isfinite(gp).all() and np.isfinite(gz).all()


def test_proto_prototypes_without_pairs_are_skipped():
    p = np.eye(3)
    z = np.eye(3)[:2]
    full = proto_contrastive_loss(p, z, [0, 1], 2.0, V.PLAIN)[0]
    assert full == pytest.approx(brute_proto_loss(p, z, [0, 1], 2.0, "plain"))
    # one class only: no prototype has negatives
    assert proto_contrastive_loss(p, z, [0, 0], 2.0, V.PLAIN)[0] == 0.0


def test_proto_loss_input_errors():
    p, z, y = _batch(0)
    with pytest.raises(ValueError, match="label 9"):
        proto_contrastive_loss(p, z, np.full(len(z), 9), 1.0, V.PLAIN)
    with pytest.raises(ValueError, match="MarginPair"):
        proto_contrastive_loss(p, z, y, 1.0, V.MARGIN)
    with pytest.raises(ValueError):
        proto_contrastive_loss(p, z, y, 0.0, V.PLAIN)


def test_semantic_examples():
    assert abs(semantic_loss(np.zeros((3, 4)), [0, 1, 3], 10.0)[0] - math.log(4)) <= 1e-12
    assert semantic_loss(np.array([[1.0, 0.0]]), [0], 2.0)[0] == pytest.approx(0.126928, abs=1e-6)
    assert semantic_loss(np.array([[100.0, 0.0]]), [0], 10.0)[0] == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_semantic_shift_invariance(seed, c):
    s = Rng(seed).normal((3, 5))
    y = [0, 2, 4]
    assert semantic_loss(s + c, y, 3.0)[0] == pytest.approx(semantic_loss(s, y, 3.0)[0], abs=1e-9)


def test_semantic_decreases_with_gamma_when_correct_wins():
    s = np.array([[2.0, 0.5, -1.0], [0.0, 1.0, 0.2]])
    losses = [semantic_loss(s, [0, 1], g)[0] for g in (0.5, 1.0, 5.0, 20.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def _rn(seed, d_h=4, ad=3):
    rng = Rng(seed)
    rn = Mlp(MlpSpec((d_h + ad, 5, 1)), "RN")
    for p in rn.params:
        p.value[...] = rng.normal(p.value.shape, 0.7)
    return rn


def test_center_semantic_single_sample_per_class_equals_sample_loss():
    rn = _rn(0)
    rng = Rng(1)
    h, attrs = rng.normal((3, 4)), rng.normal((3, 3))
    y = np.array([2, 0, 1])
    order = np.argsort(y)
    center = center_semantic_loss(h, y, rn, attrs, 4.0, accumulate=False)[0]
    sample = sample_semantic_loss(h[order], y[order], rn, attrs, 4.0, accumulate=False)[0]
    assert center == pytest.approx(sample, abs=1e-12)


def test_center_semantic_duplicated_rows():
    rn = _rn(2)
    rng = Rng(3)
    h, attrs = rng.normal((2, 4)), rng.normal((2, 3))
    once = center_semantic_loss(h, [0, 1], rn, attrs, 4.0, accumulate=False)[0]
    twice = center_semantic_loss(np.vstack([h, h]), [0, 1, 0, 1], rn, attrs, 4.0, accumulate=False)[0]
    assert once == pytest.approx(twice, abs=1e-12)


@pytest.mark.parametrize("term", gradcheck.LOSS_TERMS)
def test_gradcheck_terms_small_sample(term):
    worst = max(gradcheck.CHECKS[term](seed) for seed in range(5))
    assert worst < gradcheck.TOLERANCE


def _linear_critic(w_x, w_a):
    w = np.concatenate([w_x, w_a])[:, None]
    return Mlp(MlpSpec((len(w), 1)), "D", [Param(w), Param(np.zeros((1, 1)))])


def test_gp_unit_linear_critic_is_zero():
    rng = Rng(0)
    w_x = l2_normalize_rows(rng.normal((1, 6)))[0][0]
    d = _linear_critic(w_x, rng.normal(3))
    pen = gradient_penalty(d, rng.normal((5, 6)), rng.normal((5, 6)), rng.normal((5, 3)), rng)
    assert abs(pen) <= 1e-12


def test_gp_zero_critic_is_one():
    d = Mlp(MlpSpec((6 + 3, 4, 1)), "D")
    rng = Rng(1)
    pen = gradient_penalty(d, rng.normal((5, 6)), rng.normal((5, 6)), rng.normal((5, 3)), rng)
    assert pen == pytest.approx(1.0, abs=1e-15)


def test_gp_shape_errors():
    d = Mlp(MlpSpec((4 + 1, 1)), "D")
    with pytest.raises(ValueError):
        gradient_penalty(d, np.ones((2, 4)), np.ones((3, 4)), np.ones((2, 1)), Rng(0))


def test_wgan_zero_critic():
    d = Mlp(MlpSpec((6 + 3, 4, 1)), "D")
    g = Mlp(MlpSpec((3 + 2, 4, 6)), "G")
    rng = Rng(0)
    res = wgan_losses(d, g, rng.normal((4, 6)), rng.normal((4, 3)), rng, gp_coeff=10.0)
    assert res.d_loss == pytest.approx(10.0, abs=1e-12)
    assert res.g_loss == 0.0
    assert res.fake.shape == (4, 6)


def test_critic_identical_real_and_fake_cancel():
    rng = Rng(5)
    w_x = l2_normalize_rows(rng.normal((1, 4)))[0][0]
    d = _linear_critic(w_x, rng.normal(2))
    x = rng.normal((3, 4))
    loss, pen = critic_loss(d, x, x.copy(), rng.normal((3, 2)), rng, 10.0, accumulate=False)
    assert abs(loss) <= 1e-12 and abs(pen) <= 1e-12


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_proto=-1.0)


def test_total_loss():
    c = LossComponents(wgan=1.0, proto=2.0, sem=3.0, center=4.0)
    assert total_loss(c, LossWeights(0.0, 0.0, 0.0)) == 1.0
    assert total_loss(c, LossWeights(0.1, 0.01, 1.0)) == pytest.approx(1.0 + 0.2 + 0.03 + 4.0)
    assert total_loss(LossComponents(wgan=-0.5), LossWeights()) == -0.5
