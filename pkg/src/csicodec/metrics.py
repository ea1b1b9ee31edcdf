"""Evaluation metrics with brute-force-checkable definitions."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import adcrm

REPORT_SCHEMA = "csicodec/run-report/v1"


class MetricError(Exception):
    pass


def nmse_db(h, h_hat):
    """10*log10 of the mean per-sample squared-error-to-reference ratio.

    ``h``/``h_hat``: (N, ...) arrays (real view or complex). Perfect
    reconstruction returns -inf; a zero-norm reference is an error.
    """
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    if h.shape != h_hat.shape:
        raise MetricError("shape mismatch")
    n = h.shape[0]
    ref = (np.abs(h.reshape(n, -1)) ** 2).sum(axis=1)
    if (ref == 0).any():
        raise MetricError("zero-norm reference sample")
    err = (np.abs((h - h_hat).reshape(n, -1)) ** 2).sum(axis=1)
    ratio = float((err / ref).mean())
    if ratio == 0.0:
        return float("-inf")
    return float(10.0 * np.log10(ratio))


def nmse_db_planes(target_planes, pred_planes, stats):
    """NMSE on physical (denormalised) values of [0,1]-plane tensors."""
    t = adcrm.denormalize_planes(np.asarray(target_planes), stats)
    p = adcrm.denormalize_planes(np.asarray(pred_planes), stats)
    return nmse_db(t, p)


def predictions_from_logits(logits):
    """Per-group argmax (delay profile 0..4, environment 5..6) -> binary."""
    logits = np.asarray(logits)
    out = np.zeros_like(logits, dtype=np.uint8)
    dp = logits[:, :5].argmax(axis=1)
    env = logits[:, 5:7].argmax(axis=1)
    out[np.arange(len(out)), dp] = 1
    out[np.arange(len(out)), 5 + env] = 1
    return out


def f1_scores(pred, true):
    """(micro OF1, macro CF1) over 7 binary label slots.

    A class with neither positives nor predictions is excluded from the
    macro average; a class with only one of the two scores 0.
    """
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise MetricError("shape mismatch")
    tp = int(((pred == 1) & (true == 1)).sum())
    fp = int(((pred == 1) & (true == 0)).sum())
    fn = int(((pred == 0) & (true == 1)).sum())
    of1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

    per_class = []
    for c in range(pred.shape[1]):
        tpc = int(((pred[:, c] == 1) & (true[:, c] == 1)).sum())
        fpc = int(((pred[:, c] == 1) & (true[:, c] == 0)).sum())
        fnc = int(((pred[:, c] == 0) & (true[:, c] == 1)).sum())
        if tpc + fpc + fnc == 0:
            continue  # absent class: skipped, not counted as 1
        per_class.append(2 * tpc / (2 * tpc + fpc + fnc))
    cf1 = float(np.mean(per_class)) if per_class else 0.0
    return float(of1), cf1


def ggap_db(train_nmse, test_nmse):
    """Generalisability gap: test minus train, in dB."""
    return float(test_nmse - train_nmse)


def nmse_er_db(domain_values):
    """Arithmetic mean of per-domain NMSE values (dB averaged as dB)."""
    vals = list(domain_values)
    if not vals:
        raise MetricError("no domains")
    return float(np.mean(vals))


def ggap_er_db(train_values, test_values):
    return ggap_db(nmse_er_db(train_values), nmse_er_db(test_values))


def rho(h_multi, h_multi_hat):
    """Mean per-subcarrier cosine similarity of frequency-space channels.

    Inputs are complex (N, F, K). Zero-norm subcarriers are skipped; the
    skipped count is returned alongside the mean.
    """
    h = np.asarray(h_multi)
    hh = np.asarray(h_multi_hat)
    if h.shape != hh.shape:
        raise MetricError("shape mismatch")
    num = np.abs(np.einsum("nfk,nfk->nf", hh.conj(), h))
    na = np.linalg.norm(hh, axis=2)
    nb = np.linalg.norm(h, axis=2)
    valid = (na > 0) & (nb > 0)
    skipped = int((~valid).sum())
    if not valid.any():
        raise MetricError("all subcarriers degenerate")
    value = float((num[valid] / (na[valid] * nb[valid])).mean())
    return value, skipped


def param_count(block):
    """Exact trainable parameter tally of a Block tree."""
    return int(block.param_count())


def _conv_flops(k, cin, cout, out_hw):
    return 2 * k * k * cin * cout * out_hw[0] * out_hw[1]


def flop_estimate(codec, gamma):
    """Multiply-accumulates x2 for the encode+decode path at one rate.

    Complex convolutions count as four real convolutions of the same
    geometry; attention/normalisation arithmetic is negligible against the
    convolution and dense terms and is not counted.
    """
    cfg = codec.config
    n = cfg.spatial
    q = n // 4
    _, sup_len, unsup_len = cfg.lengths(gamma)
    total = 0
    # encoder stems (complex 3x3 at full resolution)
    total += 4 * _conv_flops(3, 1, cfg.stem_scatter_channels, (n, n))
    total += 4 * _conv_flops(3, 1, cfg.stem_feature_channels, (n, n))
    # two heads: conv s2 each
    for _ in range(2):
        total += _conv_flops(3, 2 * cfg.stem_feature_channels,
                             cfg.head_mid_channels, (n // 2, n // 2))
        total += _conv_flops(3, cfg.head_mid_channels, cfg.head_out_channels, (q, q))
    total += _conv_flops(1, cfg.head_out_channels, cfg.csra_channels, (q, q))
    dim = cfg.feature_dim
    total += 2 * dim * sup_len + 2 * dim * unsup_len
    # decoder dense expanders + gates
    total += 2 * sup_len * dim + 2 * unsup_len * dim
    total += 2 * 7 * dim + 2 * 7 * n * 2
    d0, d1, d2 = cfg.deep_channels
    total += 4 * _conv_flops(4, d0, d1, (n // 2, n // 2))
    total += 4 * (_conv_flops(3, d1, d1, (n // 2, n // 2))
                  + _conv_flops(5, d1, d1, (n // 2, n // 2)))
    total += 4 * _conv_flops(4, d1, d2, (n, n))
    total += 4 * (_conv_flops(3, d2, d2, (n, n)) + _conv_flops(5, d2, d2, (n, n)))
    r0, r1, r2 = cfg.direct_channels
    total += _conv_flops(4, r0, r1, (n // 2, n // 2))
    total += _conv_flops(4, r1, r2, (n, n))
    # refine block
    total += 2 * 9 * 2 * d2 * n * n
    total += _conv_flops(1, 2 * d2, 8 * d2, (n, n))
    total += _conv_flops(1, 8 * d2, 2, (n, n))
    return int(total)


@dataclass
class RunReport:
    """Metric bundle for one evaluation point."""

    nmse_db: float = float("nan")
    nmse_er_db: float = float("nan")
    ggap_db: float = float("nan")
    ggap_er_db: float = float("nan")
    of1: float = float("nan")
    cf1: float = float("nan")
    rho: float = float("nan")
    param_count: int = 0
    per_domain: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["schema"] = REPORT_SCHEMA
        return d

    def to_json(self):
        return json.dumps(_sanitize(self.to_dict()), sort_keys=True)

    @staticmethod
    def csv_header():
        return ["nmse_db", "nmse_er_db", "ggap_db", "ggap_er_db",
                "of1", "cf1", "rho", "param_count"]

    def csv_row(self):
        return [self.nmse_db, self.nmse_er_db, self.ggap_db, self.ggap_er_db,
                self.of1, self.cf1, self.rho, self.param_count]


def _sanitize(obj):
    """JSON-safe copy: -inf/inf/nan become string sentinels."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float):
        if obj == float("-inf"):
            return "-inf"
        if obj == float("inf"):
            return "inf"
        if obj != obj:
            return "nan"
    if isinstance(obj, (np.floating, np.integer)):
        return _sanitize(float(obj))
    return obj


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch"] + RunReport.csv_header())
    for i, r in enumerate(reports, start=1):
        writer.writerow([i] + r.csv_row())
    return buf.getvalue()


def reports_to_json(reports):
    return json.dumps([_sanitize(r.to_dict()) for r in reports], sort_keys=True)
