"""Distribution alignment, confidence masking, LSGAN, adaptation plumbing."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csicodec import engine as eg
from csicodec import adaptation as da
from csicodec.codec import CodecConfig, HybridCodec


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def make_probs(rng, n):
    out = np.empty((n, 7))
    out[:, :5] = softmax_rows(rng.normal(size=(n, 5)))
    out[:, 5:] = softmax_rows(rng.normal(size=(n, 2)))
    return out


# ---------------------------------------------------------------------------
# alignment


def test_alignment_identity_when_means_match():
    rng = np.random.default_rng(0)
    y = make_probs(rng, 16)
    out = da.align_distribution(y, y)
    np.testing.assert_allclose(out.mean(axis=0), y.mean(axis=0), atol=1e-7)
    np.testing.assert_allclose(out[:, :5].sum(axis=1), 1.0, atol=1e-9)


def test_alignment_single_sample_hand_case():
    # one target sample [0.5, 0.5] in a 2-slot group against source mean
    # [0.8, 0.2]: the ratio rescale lands exactly on [0.8, 0.2]
    y_tu = np.array([[0.5, 0.5]])
    y_sl = np.array([[0.8, 0.2]])
    target = np.maximum(y_sl.mean(axis=0), 1e-8)
    block = y_tu * (target / y_tu.mean(axis=0))
    block /= block.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(block, [[0.8, 0.2]], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_alignment_batch_mean_identity_random(seed):
    rng = np.random.default_rng(seed)
    y_tu = make_probs(rng, 24)
    y_sl = make_probs(rng, 16)
    out = da.align_distribution(y_tu, y_sl)
    for lo, hi in da.GROUPS:
        np.testing.assert_allclose(out[:, lo:hi].mean(axis=0),
                                   y_sl[:, lo:hi].mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(out[:, lo:hi].sum(axis=1), 1.0, atol=1e-9)
        assert (out[:, lo:hi] >= 0).all()


def test_alignment_floors_zero_expectations():
    y_tu = np.zeros((3, 7))
    y_tu[:, 0] = 1.0
    y_tu[:, 5] = 1.0
    y_sl = make_probs(np.random.default_rng(1), 4)
    out = da.align_distribution(y_tu, y_sl)
    assert np.isfinite(out).all()


# ---------------------------------------------------------------------------
# confidence mask


def test_confidence_mask_extremes():
    rng = np.random.default_rng(2)
    y_tu = make_probs(rng, 10)
    y_sl = make_probs(rng, 8)
    assert da.confidence_mask(y_tu, y_sl, 0.0).all()
    assert not da.confidence_mask(y_tu, y_sl, 50.0).any()


def test_confidence_mask_hand_enumeration():
    y_sl = np.array([
        [0.9, 0.025, 0.025, 0.025, 0.025, 0.7, 0.3],
        [0.5, 0.125, 0.125, 0.125, 0.125, 0.6, 0.4],
    ])
    y_tu = np.array([
        [0.8, 0.05, 0.05, 0.05, 0.05, 0.9, 0.1],   # dp .8 >= .7*c? ...
        [0.3, 0.3, 0.2, 0.1, 0.1, 0.5, 0.5],
    ])
    tau = 1.0
    c_dp = tau * (0.9 + 0.5) / 2        # 0.70
    c_env = tau * (0.7 + 0.6) / 2       # 0.65
    want = np.array([
        int(0.8 >= c_dp and 0.9 >= c_env),
        int(0.3 >= c_dp and 0.5 >= c_env),
    ])
    np.testing.assert_array_equal(da.confidence_mask(y_tu, y_sl, tau), want)


def test_confidence_mask_monotone_in_tau():
    rng = np.random.default_rng(3)
    y_tu = make_probs(rng, 32)
    y_sl = make_probs(rng, 16)
    prev = da.confidence_mask(y_tu, y_sl, 0.0)
    for tau in (0.5, 0.8, 1.0, 1.3, 2.0):
        cur = da.confidence_mask(y_tu, y_sl, tau)
        assert not (cur & ~prev).any()  # raising tau never unmasks
        prev = cur


# ---------------------------------------------------------------------------
# interpolation / warmup


def test_interpolation_identities_and_convexity():
    rng = np.random.default_rng(4)
    a = eg.constant(rng.normal(size=(6, 7)))
    out = da.interpolate_logits(a, a, np.random.default_rng(0))
    np.testing.assert_allclose(out.data, a.data, atol=1e-12)

    b = eg.constant(rng.normal(size=(6, 7)))
    out = da.interpolate_logits(a, b, np.random.default_rng(1))
    lo = np.minimum(a.data, b.data)
    hi = np.maximum(a.data, b.data)
    assert ((out.data >= lo - 1e-12) & (out.data <= hi + 1e-12)).all()


def test_interpolation_shares_lambda_within_groups():
    a = eg.constant(np.zeros((4, 7)))
    b = eg.constant(np.ones((4, 7)))
    out = da.interpolate_logits(a, b, np.random.default_rng(2)).data
    # 1 - lambda is constant within each group per sample
    assert (np.ptp(out[:, 0:5], axis=1) < 1e-12).all()
    assert (np.ptp(out[:, 5:7], axis=1) < 1e-12).all()


def test_warmup_endpoints_and_monotonicity():
    total = 100
    assert da.warmup_mu(0, total) == 0.0
    assert da.warmup_mu(50, total) == pytest.approx(1.0)
    assert da.warmup_mu(100, total) == pytest.approx(1.0)
    vals = [da.warmup_mu(t, total) for t in range(101)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# LSGAN


def test_lsgan_optima_and_half_case():
    one = eg.constant(np.ones(4))
    zero = eg.constant(np.zeros(4))
    dis, gen = da.lsgan_pair(one, zero)
    assert float(dis.data) == 0.0
    _, gen = da.lsgan_pair(one, one)
    assert float(gen.data) == 0.0
    half = eg.constant(np.full(4, 0.5))
    dis, gen = da.lsgan_pair(half, half)
    assert float(dis.data) == pytest.approx(0.5)
    assert float(gen.data) == pytest.approx(0.25)


def test_lsgan_generator_gradient_only_through_fake():
    rng = np.random.default_rng(5)
    real = eg.param(rng.normal(size=4))
    fake = eg.param(rng.normal(size=4))
    with eg.tape() as tp:
        _, gen = da.lsgan_pair(real, fake)
    grads = tp.backward(gen)
    assert fake in grads and real not in grads


# ---------------------------------------------------------------------------
# da_logits / config


@pytest.fixture(scope="module")
def tiny_codec():
    return HybridCodec(CodecConfig(spatial=8, gammas=(Fraction(1, 2),)), seed=7)


def test_da_logits_identical_batches_agree(tiny_codec):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 4, 1, 8, 8)).astype(np.float32) * 0.1 + 0.5
    y1, y2, ytu = da.da_logits(tiny_codec, eg.constant(x), eg.constant(x.copy()))
    np.testing.assert_allclose(y1.data, ytu.data, atol=1e-6)


def test_da_logits_eval_mode_passes_agree(tiny_codec):
    # frozen batch norm reduction: the two passes coincide exactly
    rng = np.random.default_rng(7)
    x = eg.constant(rng.normal(size=(2, 4, 1, 8, 8)).astype(np.float32) * 0.1 + 0.5)
    a = tiny_codec.encoder.class_logits(x, bn_mode="eval")
    b = tiny_codec.encoder.class_logits(x, bn_mode="eval")
    np.testing.assert_array_equal(a.data, b.data)


def test_da_logits_detects_batch_stat_shift(tiny_codec):
    rng = np.random.default_rng(8)
    x_sl = rng.normal(size=(2, 4, 1, 8, 8)).astype(np.float32) * 0.1 + 0.5
    x_tu = x_sl + 0.4  # strongly shifted target batch
    y1, y2, _ = da.da_logits(tiny_codec, eg.constant(x_sl),
                             eg.constant(x_tu.astype(np.float32)))
    assert np.abs(y1.data - y2.data).max() > 1e-4


def test_da_logits_rejects_tiny_batches(tiny_codec):
    one = eg.constant(np.zeros((2, 1, 1, 8, 8), dtype=np.float32))
    with pytest.raises(da.AdaptError):
        da.da_logits(tiny_codec, one, one)


def test_da_config_validation():
    with pytest.raises(da.AdaptError):
        da.DaConfig(mode="nope")
    with pytest.raises(da.AdaptError):
        da.DaConfig(lambda_content=2.0)
    with pytest.raises(da.AdaptError):
        da.DaConfig(tau_ct=-1.0)


# ---------------------------------------------------------------------------
# hda composition


def test_hda_mode_reductions():
    content = eg.constant(np.array(0.25))
    l_da = eg.constant(np.array(0.5))
    l_fadv = eg.constant(np.array(0.125))

    dt = da.DaConfig(mode="dt", epochs=1)
    total, dec = da.hda_loss(content, None, None, dt)
    assert float(total.data) == 0.25 and set(dec) == {"content", "total"}

    hybrid = da.DaConfig(mode="da_h", lambda_rug_hda=0.1, lambda_adv=1e-2, epochs=1)
    total, dec = da.hda_loss(content, l_da, l_fadv, hybrid)
    assert float(total.data) == pytest.approx(0.25 + 0.05 + 0.125)
    assert dec["content"] + dec["da"] + dec["fadv"] == pytest.approx(dec["total"], abs=1e-9)

    zeroed = da.DaConfig(mode="da_h", lambda_rug_hda=0.0, lambda_adv=0.0, epochs=1)
    total, dec = da.hda_loss(content, l_da, l_fadv, zeroed)
    assert float(total.data) == float(content.data)


def test_discriminator_scores_shape_and_params():
    rng = np.random.default_rng(9)
    dis = da.Discriminator(rng)
    x = eg.constant(rng.normal(size=(3, 2, 32, 32)).astype(np.float32))
    scores = dis(x)
    assert scores.shape == (3,)
    assert dis.param_count() > 0


def test_feature_adversarial_zero_weight_is_masked_mse(tiny_codec):
    rng = np.random.default_rng(10)
    planes = rng.normal(size=(4, 2, 8, 8)).astype(np.float32) * 0.1 + 0.5
    x = eg.constant(np.ascontiguousarray(
        planes.transpose(1, 0, 2, 3)[:, :, None]))
    cfg = da.DaConfig(mode="da_f", lambda_adv=0.0, epochs=1)
    total, content, h_hat, dis_fn = da.feature_adversarial_loss(
        tiny_codec, None, x, planes, Fraction(1, 2), cfg)
    assert total is content and dis_fn is None

    # against a hand decode with the same mask
    from csicodec.codec import star_mask
    cw = tiny_codec.encoder(x, Fraction(1, 2), bn_mode="train")
    mask = star_mask(cw.scatter, tiny_codec.config)
    want, _ = tiny_codec.decoder(cw, gt_mask=mask)
    got = float(content.data)
    ref = float(eg.mse(want, eg.constant(planes)).data)
    assert got == pytest.approx(ref, rel=1e-5)


def test_all_ones_mask_equals_unmasked_decode(tiny_codec):
    rng = np.random.default_rng(11)
    planes = rng.normal(size=(3, 2, 8, 8)).astype(np.float32) * 0.1 + 0.5
    x = eg.constant(np.ascontiguousarray(planes.transpose(1, 0, 2, 3)[:, :, None]))
    cw = tiny_codec.encoder(x, Fraction(1, 2))
    ones = np.ones((3, 1, 8, 8), dtype=np.float32)
    with_mask, _ = tiny_codec.decoder(cw, gt_mask=ones)
    without, _ = tiny_codec.decoder(cw)
    np.testing.assert_allclose(with_mask.data, without.data, atol=1e-6)


def test_discriminator_training_separates_toy_sets():
    # distinguishable real/fake blobs: the discriminator loss must fall
    rng = np.random.default_rng(12)
    dis = da.Discriminator(rng)
    opt_rng = np.random.default_rng(13)
    from csicodec.training import Adam
    opt = Adam(dis.parameters(), lr=3e-3)
    real = eg.constant((opt_rng.normal(size=(16, 2, 32, 32)) * 0.1 + 0.8)
                       .astype(np.float32))
    fake = eg.constant((opt_rng.normal(size=(16, 2, 32, 32)) * 0.1 - 0.2)
                       .astype(np.float32))
    first = None
    for step in range(50):
        with eg.tape() as tp:
            dis_loss, _ = da.lsgan_pair(dis(real), dis(fake))
        if first is None:
            first = float(dis_loss.data)
        opt.step(tp.backward(dis_loss))
    assert float(dis_loss.data) < first
