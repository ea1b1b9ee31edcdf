"""Transductive adaptation to an unlabeled target domain.

Three mechanisms compose per mode: category-logit distribution alignment
with confidence-masked self-training (multi-label variant of the
batch-norm-adapter recipe), least-squares adversarial stimulation of the
reconstruction with star-masked deep features, and the plain content loss.
Modes: dt (fine-tune on content only), da_d (content + alignment), da_f
(content + adversarial), da_h (all three).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import metrics
from .blocks import Block, Conv, Dense
from .codec import star_mask
from .training import (Adam, TrainConfig, config_hash, loss_classification,
                       loss_regression, offline_objective, snapshot,
                       TrainingDiverged, _planes_to_input, evaluate)

MODES = ("dt", "da_d", "da_f", "da_h")


class AdaptError(Exception):
    pass


@dataclass
class DaConfig:
    mode: str = "da_h"
    tau_ct: float = 0.9
    lambda_content: float = 1.0
    lambda_rug_hda: float = 1e-3
    lambda_adv: float = 1e-2
    epochs: int = 40
    budget: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    epoch_aug_set: frozenset = field(default_factory=frozenset)
    eval_cap: int = 512  # per-epoch metric subsample; final epoch is full

    def __post_init__(self):
        if self.mode not in MODES:
            raise AdaptError(f"unknown adaptation mode {self.mode!r}")
        if self.lambda_content != 1.0:
            raise AdaptError("the content weight is fixed at 1")
        if min(self.tau_ct, self.lambda_rug_hda, self.lambda_adv) < 0:
            raise AdaptError("adaptation weights must be nonnegative")
        self.epoch_aug_set = frozenset(int(e) for e in self.epoch_aug_set)

    @property
    def uses_alignment(self):
        return self.mode in ("da_d", "da_h") and self.lambda_rug_hda > 0

    @property
    def uses_adversary(self):
        return self.mode in ("da_f", "da_h") and self.lambda_adv > 0


# ---------------------------------------------------------------------------
# Logit-space machinery


def da_logits(codec, x_sl, x_tu, gamma=None):
    """Two classification passes for the batch-norm-adapter scheme.

    Pass 1 runs the concatenated source+target batch with train-mode batch
    norm and returns gradient-carrying logits split per domain. Pass 2 runs
    the source batch alone with stats-only batch norm, entirely detached:
    non-batch-norm parameters receive gradients only through pass 1.
    """
    n_sl = x_sl.shape[1]
    n_tu = x_tu.shape[1]
    if n_sl < 2 or n_tu < 2:
        raise AdaptError("adaptation batches need at least two samples each")
    both = eg.concat([x_sl, x_tu], axis=1)
    y_all = codec.encoder.class_logits(both, bn_mode="train")
    y_sl_1 = eg.slice_axis(y_all, 0, 0, n_sl)
    y_tu = eg.slice_axis(y_all, 0, n_sl, n_sl + n_tu)
    y_sl_2 = eg.stop_gradient(
        codec.encoder.class_logits(eg.stop_gradient(x_sl), bn_mode="stats_only"))
    return y_sl_1, y_sl_2, y_tu


GROUPS = ((0, 5), (5, 7))  # delay-profile slots, environment slots


def interpolate_logits(y_first, y_second, rng):
    """Per-sample, per-group random convex blend of the two passes."""
    if y_first.shape != y_second.shape:
        raise AdaptError("logit shapes differ")
    n = y_first.shape[0]
    lam = np.empty((n, 7), dtype=y_first.dtype)
    lam[:, 0:5] = rng.uniform(0.0, 1.0, size=(n, 1))
    lam[:, 5:7] = rng.uniform(0.0, 1.0, size=(n, 1))
    lam_t = eg.constant(lam)
    return eg.add(eg.mul(y_first, lam_t),
                  eg.mul(y_second, eg.constant(1.0 - lam)))


def group_softmax(logits):
    """(N, 7) -> per-group softmax probabilities, numpy."""
    arr = np.asarray(logits.data if isinstance(logits, eg.Tensor) else logits,
                     dtype=np.float64)
    out = np.empty_like(arr)
    for lo, hi in GROUPS:
        z = arr[:, lo:hi] - arr[:, lo:hi].max(axis=1, keepdims=True)
        e = np.exp(z)
        out[:, lo:hi] = e / e.sum(axis=1, keepdims=True)
    return out


def align_distribution(y_tu_soft, y_sl_soft, tol=1e-8, max_iters=200):
    """Rescale target pseudo-labels so their batch mean matches the source.

    One rescale step multiplies by the expectation ratio and renormalises
    each sample's group to sum one; iterating the step to its fixed point
    keeps rows valid distributions while driving the batch mean onto the
    source mean (iterative proportional fitting). Zero expectations are
    floored at 1e-8.
    """
    y_tu_soft = np.asarray(y_tu_soft, dtype=np.float64)
    y_sl_soft = np.asarray(y_sl_soft, dtype=np.float64)
    out = y_tu_soft.copy()
    for lo, hi in GROUPS:
        block = out[:, lo:hi]
        target = np.maximum(y_sl_soft[:, lo:hi].mean(axis=0), 1e-8)
        for _ in range(max_iters):
            mean = np.maximum(block.mean(axis=0), 1e-8)
            block = block * (target / mean)
            block = block / np.maximum(block.sum(axis=1, keepdims=True), 1e-8)
            if np.abs(block.mean(axis=0) - target).max() < tol:
                break
        out[:, lo:hi] = block
    return out


def confidence_mask(y_tilde_tu, y_hat_sl, tau_ct):
    """1 where both group confidences clear the source-relative threshold."""
    y_tilde_tu = np.asarray(y_tilde_tu)
    y_hat_sl = np.asarray(y_hat_sl)
    keep = np.ones(len(y_tilde_tu), dtype=bool)
    for lo, hi in GROUPS:
        c = tau_ct * y_hat_sl[:, lo:hi].max(axis=1).mean()
        keep &= y_tilde_tu[:, lo:hi].max(axis=1) >= c
    return keep.astype(np.uint8)


def hard_pseudo_labels(aligned):
    """Per-group argmax one-hot targets from aligned pseudo-probabilities."""
    out = np.zeros_like(aligned, dtype=np.uint8)
    for lo, hi in GROUPS:
        idx = aligned[:, lo:hi].argmax(axis=1)
        out[np.arange(len(out)), lo + idx] = 1
    return out


def warmup_mu(step, total_steps):
    """0 at the start, 1 from the halfway point on, cosine in between."""
    angle = min(np.pi, 2.0 * np.pi * step / max(1, total_steps))
    return float(0.5 - np.cos(angle) / 2.0)


def _masked_group_ce(logits, labels, mask):
    """Mean grouped cross entropy over the masked samples (0 if none)."""
    if mask.sum() == 0:
        return None
    weights = mask.astype(np.float64) / mask.sum()
    per = None
    for lo, hi in GROUPS:
        lp = eg.log_softmax(eg.slice_axis(logits, 1, lo, hi), axis=-1)
        picked = eg.tsum(eg.mul(lp, eg.constant(labels[:, lo:hi].astype(lp.dtype))),
                         axis=1)
        per = picked if per is None else eg.add(per, picked)
    return eg.neg(eg.tsum(eg.mul(per, eg.constant(weights.astype(per.dtype)))))


def da_loss(codec, x_sl, labels_sl, x_tu, step, total_steps, cfg, rng):
    """Alignment loss: supervised interpolated source CE plus warmed-up,
    confidence-masked target self-training CE on hard pseudo-labels.

    Pseudo-labels come from an eval-mode target pass, aligned to the source
    batch statistics, and enter as stop-gradient targets for the train-mode
    target logits of the concatenated pass.
    """
    y_sl_1, y_sl_2, y_tu = da_logits(codec, x_sl, x_tu)
    y_sl = interpolate_logits(y_sl_1, y_sl_2, rng)
    l_sl = loss_classification(y_sl, labels_sl)

    y_tu_eval = codec.encoder.class_logits(eg.stop_gradient(x_tu), bn_mode="eval")
    aligned = align_distribution(group_softmax(y_tu_eval), group_softmax(y_sl))
    mask = confidence_mask(aligned, group_softmax(y_sl), cfg.tau_ct)
    mu = warmup_mu(step, total_steps)
    l_tu = _masked_group_ce(y_tu, hard_pseudo_labels(aligned), mask)
    if l_tu is None or mu == 0.0:
        return l_sl, l_sl, None, mask
    total = eg.add(l_sl, eg.mul(l_tu, mu))
    return total, l_sl, l_tu, mask


# ---------------------------------------------------------------------------
# Adversarial machinery


def lsgan_pair(scores_real, scores_fake):
    """Least-squares GAN losses: ((D(real)-1)^2 + D(fake)^2, (D(fake)-1)^2)."""
    one_r = eg.sub(scores_real, 1.0)
    dis = eg.add(eg.tmean(eg.mul(one_r, one_r)),
                 eg.tmean(eg.mul(scores_fake, scores_fake)))
    one_f = eg.sub(scores_fake, 1.0)
    gen = eg.tmean(eg.mul(one_f, one_f))
    return dis, gen


class Discriminator(Block):
    """Three conv stages with parallel blur-pooled max/average branches."""

    def __init__(self, rng, channels=(2, 8, 16, 32), dtype=np.float32):
        super().__init__()
        self.stages = [
            self._child(f"stage{i}", Conv(channels[i], channels[i + 1], 3, 1, 1,
                                          rng, dtype))
            for i in range(3)
        ]
        blur = np.array([1.0, 2.0, 1.0], dtype=dtype)
        blur = np.outer(blur, blur)
        blur /= blur.sum()
        self.blur = blur  # fixed anti-alias kernel, not trainable
        self.fc = self._child("fc", Dense(channels[-1], 1, rng, dtype))

    def _blurred(self, x):
        c = x.shape[1]
        k = eg.constant(np.tile(self.blur.astype(x.dtype), (c, 1, 1)))
        return eg.depthwise_conv2d(x, k, pad=1)

    def _downsample(self, x):
        vals, _ = eg.max_pool_with_index(x, (2, 2))
        branch_max = self._blurred(vals)
        n, c, h, w = x.shape
        avg = eg.tmean(eg.reshape(x, (n, c, h // 2, 2, w // 2, 2)), axis=(3, 5))
        branch_avg = self._blurred(avg)
        return eg.add(branch_max, branch_avg)

    def __call__(self, x):
        """x: (N, 2, n, n) real view -> (N,) scores."""
        y = x
        for stage in self.stages:
            y = self._downsample(eg.leaky_relu(stage(y)))
        pooled = eg.tmean(y, axis=(2, 3))
        return eg.reshape(self.fc(pooled), (-1,))


def feature_adversarial_loss(codec, discriminator, x_tu, target_planes,
                             gamma, cfg, rng=None, bn_mode="train"):
    """Masked-decode content term plus the weighted LSGAN generator term.

    Decodes target codewords with the deep features star-masked, scores the
    reconstruction against the real target, and returns
    (generator_total, content_mse, fake_reconstruction, dis_loss_fn) where
    ``dis_loss_fn`` re-scores detached reconstructions for the
    discriminator's own update.
    """
    cw = codec.encoder(x_tu, gamma, bn_mode=bn_mode)
    mask = star_mask(cw.scatter, codec.config)
    h_hat, _ = codec.decoder(cw, gt_mask=mask)
    real = eg.constant(np.asarray(target_planes))
    content = loss_regression(h_hat, real)
    if cfg.lambda_adv == 0:
        return content, content, h_hat, None
    fake_scores = discriminator(h_hat)
    _, gen = lsgan_pair(discriminator(real), fake_scores)
    total = eg.add(content, eg.mul(gen, cfg.lambda_adv))

    def dis_loss():
        dis, _ = lsgan_pair(discriminator(real),
                            discriminator(eg.stop_gradient(h_hat)))
        return dis

    return total, content, h_hat, dis_loss


def hda_loss(content, l_da, l_fadv, cfg):
    """Mode-gated combination; inactive terms are absent, not just zeroed,
    so a zero-weight run reproduces the direct-transfer loss exactly."""
    total = content
    decomposition = {"content": float(content.data)}
    if l_da is not None and cfg.uses_alignment:
        total = eg.add(total, eg.mul(l_da, cfg.lambda_rug_hda))
        decomposition["da"] = cfg.lambda_rug_hda * float(l_da.data)
    if l_fadv is not None and cfg.uses_adversary:
        total = eg.add(total, l_fadv)
        decomposition["fadv"] = float(l_fadv.data)
    decomposition["total"] = float(total.data)
    return total, decomposition


# ---------------------------------------------------------------------------
# Adaptation loop


def _adaptation_step(codec, discriminator, target_planes, src_planes,
                     src_labels, gamma, cfg, rng, step, total_steps,
                     want_aug):
    """One optimisation step; returns (total loss, decomposition, dis_fn)."""
    x_tu = _planes_to_input(target_planes)
    y_tu = eg.constant(np.asarray(target_planes))

    cw = codec.encoder(x_tu, gamma, bn_mode="train")
    h_hat, h_tilde = codec.decoder(cw, training=want_aug, rng=rng)
    content = loss_regression(h_hat, y_tu)
    if want_aug and h_tilde is not None:
        content = eg.add(content, loss_regression(h_tilde, y_tu))

    l_fadv = None
    dis_loss_fn = None
    if cfg.uses_adversary:
        mask = star_mask(cw.scatter, codec.config)
        h_masked, _ = codec.decoder(cw, gt_mask=mask)
        masked_content = loss_regression(h_masked, y_tu)
        fake_scores = discriminator(h_masked)
        _, gen = lsgan_pair(discriminator(y_tu), fake_scores)
        l_fadv = eg.add(masked_content, eg.mul(gen, cfg.lambda_adv))

        def dis_loss_fn():
            dis, _ = lsgan_pair(discriminator(y_tu),
                                discriminator(eg.stop_gradient(h_masked)))
            return dis

    l_da = None
    if cfg.uses_alignment:
        sidx = rng.choice(len(src_planes), size=len(target_planes),
                          replace=False)
        x_sl = _planes_to_input(src_planes[sidx])
        l_da, _, _, _ = da_loss(codec, x_sl, src_labels[sidx], x_tu,
                                step, total_steps, cfg, rng)

    total, decomposition = hda_loss(content, l_da, l_fadv, cfg)
    return total, decomposition, dis_loss_fn


def adapt(checkpoint, source_train, source_test, target_set, cfg,
          codec_cfg=None, progress=None):
    """Run one adaptation mode from an offline checkpoint.

    The target budget is drawn from ``target_set``; any remaining samples
    form a held-out target split used for the per-epoch GGAP. Per-epoch
    evaluations run on deterministic subsamples (caps in ``cfg``); the final
    epoch is always evaluated in full. Returns (adapted checkpoint, reports,
    codec).
    """
    from .codec import CodecConfig, HybridCodec

    codec = HybridCodec(codec_cfg or CodecConfig(), seed=cfg.seed)
    checkpoint.apply_to(codec)
    gamma = checkpoint.gamma
    if len(target_set) < cfg.batch_size:
        raise AdaptError("target set smaller than one batch")

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xADA)))
    budget = min(cfg.budget, len(target_set))
    pick = np.sort(rng.choice(len(target_set), size=budget, replace=False))
    target = target_set.subset(pick)
    rest = np.setdiff1d(np.arange(len(target_set)), pick)
    held_out = target_set.subset(rest) if len(rest) >= 2 else None

    discriminator = None
    dis_opt = None
    if cfg.mode in ("da_f", "da_h"):
        discriminator = Discriminator(
            np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD15))))
        dis_opt = Adam(discriminator.parameters(), lr=cfg.lr)
    opt = Adam(codec.parameters(), lr=cfg.lr)

    n = len(target)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    src_planes = np.asarray(source_train.planes)
    src_labels = source_train.labels
    reports = []
    step = 0

    from . import adcrm as _adcrm
    from .cdl import LinkConfig
    link = LinkConfig()
    transform = _adcrm.AdcrmTransform(link.n_subcarriers, link.n_antennas,
                                      400, link.n_antennas)

    eval_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE7A1)))
    def subsample(ds, cap):
        if ds is None or len(ds) <= cap:
            return ds
        return ds.subset(np.sort(eval_rng.choice(len(ds), size=cap,
                                                 replace=False)))

    train_probe = subsample(target, cfg.eval_cap)
    test_probe = subsample(held_out, cfg.eval_cap)
    source_probe = subsample(source_test, cfg.eval_cap)
    decomposition = {}

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        want_aug = epoch in cfg.epoch_aug_set
        for lo in range(0, steps_per_epoch * cfg.batch_size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue
            with eg.tape() as tp:
                total, decomposition, dis_loss_fn = _adaptation_step(
                    codec, discriminator, target.planes[idx], src_planes,
                    src_labels, gamma, cfg, rng, step, total_steps, want_aug)
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite adaptation loss at epoch {epoch}")
            opt.step(tp.backward(total))
            if dis_loss_fn is not None:
                with eg.tape() as dtp:
                    dl = dis_loss_fn()
                dis_opt.step(dtp.backward(dl))
            step += 1

        final_epoch = epoch == cfg.epochs
        tr_set = target if final_epoch else train_probe
        te_set = held_out if final_epoch else test_probe
        src_set = source_test if final_epoch else source_probe
        train_rep, _, _ = evaluate(codec, tr_set, gamma)
        src_rep, _, _ = evaluate(codec, src_set, gamma)
        test_nmse = float("nan")
        rho_val = float("nan")
        if te_set is not None:
            test_rep, _, _ = evaluate(codec, te_set, gamma, with_rho=True,
                                      transform=transform)
            test_nmse, rho_val = test_rep.nmse_db, test_rep.rho
        report = metrics.RunReport(
            nmse_db=test_nmse if te_set is not None else train_rep.nmse_db,
            ggap_db=(test_nmse - train_rep.nmse_db
                     if te_set is not None else float("nan")),
            rho=rho_val,
            of1=src_rep.of1, cf1=src_rep.cf1,
            param_count=metrics.param_count(codec) + (
                metrics.param_count(discriminator) if discriminator else 0),
            extras={"epoch": epoch, "mode": cfg.mode,
                    "target_train_nmse_db": train_rep.nmse_db,
                    "decomposition": decomposition,
                    "source_of1": src_rep.of1},
        )
        reports.append(report)
        if progress:
            progress(epoch, report)

    final = snapshot(codec, opt, cfg.epochs, rng,
                     config_hash(TrainConfig(gamma=gamma, epochs=cfg.epochs,
                                             seed=cfg.seed),
                                 codec.config), gamma)
    return final, reports, codec
