"""Metric definitions vs brute-force counting/summation oracles."""

import json

import numpy as np
import pytest

from csicodec import metrics


def nmse_oracle(h, h_hat):
    vals = []
    for i in range(h.shape[0]):
        num = (np.abs(h[i] - h_hat[i]) ** 2).sum()
        den = (np.abs(h[i]) ** 2).sum()
        vals.append(num / den)
    return 10 * np.log10(np.mean(vals))


def f1_oracle(pred, true):
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            if pred[i, c] and true[i, c]:
                tp += 1
            elif pred[i, c] and not true[i, c]:
                fp += 1
            elif not pred[i, c] and true[i, c]:
                fn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def test_nmse_trivial_values():
    h = np.random.default_rng(0).normal(size=(4, 6)) + 1.0
    assert metrics.nmse_db(h, np.zeros_like(h)) == pytest.approx(0.0, abs=1e-9)
    assert metrics.nmse_db(h, 0.5 * h) == pytest.approx(-6.0206, abs=1e-3)
    assert metrics.nmse_db(h, h) == float("-inf")


def test_nmse_matches_oracle_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h = rng.normal(size=(5, 3, 4)) + 1j * rng.normal(size=(5, 3, 4))
        h_hat = h + 0.3 * (rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape))
        assert metrics.nmse_db(h, h_hat) == pytest.approx(
            nmse_oracle(h, h_hat), abs=1e-9)


def test_nmse_scale_invariant_and_errors():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(3, 8))
    h_hat = rng.normal(size=(3, 8))
    a = metrics.nmse_db(h, h_hat)
    b = metrics.nmse_db(7.5 * h, 7.5 * h_hat)
    assert a == pytest.approx(b, abs=1e-9)
    with pytest.raises(metrics.MetricError):
        metrics.nmse_db(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(metrics.MetricError):
        metrics.nmse_db(h, h_hat[:2])


def test_f1_perfect_and_all_wrong():
    true = np.zeros((4, 7), dtype=int)
    true[:, 1] = 1
    true[:, 5] = 1
    of1, cf1 = metrics.f1_scores(true, true)
    assert of1 == 1.0 and cf1 == 1.0

    pred = np.zeros_like(true)
    pred[:, 2] = 1
    pred[:, 6] = 1
    of1, cf1 = metrics.f1_scores(pred, true)
    assert of1 == 0.0 and cf1 == 0.0


def test_f1_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        logits = rng.normal(size=(6, 7))
        pred = metrics.predictions_from_logits(logits)
        true = metrics.predictions_from_logits(rng.normal(size=(6, 7)))
        of1, _ = metrics.f1_scores(pred, true)
        assert of1 == pytest.approx(f1_oracle(pred, true), abs=1e-9)


def test_f1_skips_absent_classes():
    # class 2 has no positives and no predictions: excluded from CF1
    true = np.array([[1, 0, 0, 0, 0, 1, 0], [0, 1, 0, 0, 0, 1, 0]])
    pred = np.array([[1, 0, 0, 0, 0, 1, 0], [1, 0, 0, 0, 0, 1, 0]])
    _, cf1 = metrics.f1_scores(pred, true)
    # classes: 0 (tp1 fp1) f1=2/3; 1 (fn1) 0; 5 perfect 1; others skipped
    assert cf1 == pytest.approx((2 / 3 + 0.0 + 1.0) / 3)


def test_predictions_from_logits_one_hot_per_group():
    logits = np.random.default_rng(4).normal(size=(10, 7))
    pred = metrics.predictions_from_logits(logits)
    assert (pred[:, :5].sum(axis=1) == 1).all()
    assert (pred[:, 5:].sum(axis=1) == 1).all()


def test_ggap_and_domain_means():
    assert metrics.ggap_db(-11.40, -10.72) == pytest.approx(0.68)
    assert metrics.ggap_db(-5.0, -5.0) == 0.0
    assert metrics.nmse_er_db([-4.0, -6.0]) == pytest.approx(-5.0)
    assert metrics.nmse_er_db([-7.5]) == -7.5
    assert metrics.ggap_er_db([-10.0, -12.0], [-9.0, -11.0]) == pytest.approx(1.0)
    with pytest.raises(metrics.MetricError):
        metrics.nmse_er_db([])


def test_rho_invariances():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(2, 8, 4)) + 1j * rng.normal(size=(2, 8, 4))
    val, skipped = metrics.rho(h, h)
    assert val == pytest.approx(1.0) and skipped == 0
    c = 0.3 - 1.7j
    val, _ = metrics.rho(h, c * h)
    assert val == pytest.approx(1.0)

    a = np.zeros((1, 1, 2), dtype=complex)
    b = np.zeros((1, 1, 2), dtype=complex)
    a[0, 0] = [1.0, 0.0]
    b[0, 0] = [0.0, 1.0]
    val, _ = metrics.rho(a, b)
    assert val == pytest.approx(0.0, abs=1e-12)


def test_rho_skips_degenerate_subcarriers():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(1, 4, 3)) + 1j * rng.normal(size=(1, 4, 3))
    h[0, 2] = 0.0
    val, skipped = metrics.rho(h, h)
    assert skipped == 1 and val == pytest.approx(1.0)
    with pytest.raises(metrics.MetricError):
        metrics.rho(np.zeros((1, 2, 2), dtype=complex),
                    np.zeros((1, 2, 2), dtype=complex))


def test_param_count_dense_example():
    from csicodec.blocks import Dense
    layer = Dense(512, 121, np.random.default_rng(0))
    assert layer.param_count() == 512 * 121 + 121


def test_flop_estimate_conv_formula():
    assert metrics._conv_flops(3, 8, 16, (32, 32)) == 2 * (3 * 3 * 8) * 16 * 32 * 32


def test_flop_estimate_monotone_in_rate():
    from fractions import Fraction
    from csicodec.codec import CodecConfig, HybridCodec
    codec = HybridCodec(CodecConfig(), seed=0)
    f4 = metrics.flop_estimate(codec, Fraction(1, 4))
    f32 = metrics.flop_estimate(codec, Fraction(1, 32))
    assert f4 > f32 > 0


def test_report_json_sentinels_and_csv():
    rep = metrics.RunReport(nmse_db=float("-inf"), of1=0.5)
    data = json.loads(rep.to_json())
    assert data["nmse_db"] == "-inf"
    assert data["schema"] == metrics.REPORT_SCHEMA

    csv_text = metrics.reports_to_csv([metrics.RunReport(nmse_db=-3.0)])
    assert csv_text.splitlines()[0].startswith("epoch,nmse_db")
    assert "-3.0" in csv_text


def test_report_roundtrip_deterministic():
    rep = metrics.RunReport(nmse_db=-8.25, of1=0.91, extras={"epoch": 3})
    assert rep.to_json() == metrics.RunReport(nmse_db=-8.25, of1=0.91,
                                              extras={"epoch": 3}).to_json()
