"""Offline optimisation: hybrid objective, Adam, training loop, checkpoints."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import engine as eg
from . import metrics
from .codec import CodecConfig, HybridCodec


class LabelError(Exception):
    pass


class TrainingDiverged(Exception):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# Losses


def loss_regression(h_hat, target):
    """Mean squared error over real-view elements, batch-averaged."""
    if h_hat.shape != target.shape:
        raise eg.DimensionError("regression loss: shape mismatch")
    return eg.mse(h_hat, target)


loss_aug = loss_regression


def _group_cross_entropy(logits, labels, lo, hi):
    lp = eg.log_softmax(eg.slice_axis(logits, 1, lo, hi), axis=-1)
    picked = eg.tsum(eg.mul(lp, eg.constant(labels[:, lo:hi].astype(lp.dtype))),
                     axis=1)
    return eg.neg(eg.tmean(picked))


def loss_classification(logits, labels):
    """Grouped cross entropy: delay-profile slots 0..4, environment 5..6."""
    labels = np.asarray(labels)
    if labels.shape[1] != 7:
        raise LabelError("labels must have 7 slots")
    if not ((labels[:, :5].sum(axis=1) == 1).all()
            and (labels[:, 5:].sum(axis=1) == 1).all()):
        raise LabelError("each label group must be one-hot")
    return eg.add(_group_cross_entropy(logits, labels, 0, 5),
                  _group_cross_entropy(logits, labels, 5, 7))


def offline_objective(l_r, l_c, l_aug, epoch, cfg):
    """Regression + gated augmentation + weighted classification.

    The augmentation term contributes exactly when ``epoch`` is in the
    configured set (it is simply not added otherwise, so the gate is exact).
    """
    total = l_r
    if l_aug is not None and epoch in cfg.epoch_aug_set:
        total = eg.add(total, l_aug)
    if cfg.lambda_rug != 0.0:
        total = eg.add(total, eg.mul(l_c, cfg.lambda_rug))
    return total


# ---------------------------------------------------------------------------
# Optimiser


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # name -> Tensor
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.step_count = 0

    def step(self, grads, lr_scale=1.0):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        lr = self.lr * lr_scale
        for name, tensor in self.params.items():
            g = grads.get(tensor)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            tensor.data = tensor.data - (lr * update).astype(tensor.data.dtype)

    def state(self):
        return {"m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
                "step": self.step_count}

    def load(self, state):
        for k in self.m:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()
        self.step_count = state["step"]


def cosine_lr_scale(epoch, total_epochs):
    if total_epochs <= 1:
        return 1.0
    progress = (epoch - 1) / (total_epochs - 1)
    return 0.5 * (1.0 + float(np.cos(np.pi * progress)))


# ---------------------------------------------------------------------------
# Config / checkpointing


@dataclass
class TrainConfig:
    gamma: Fraction = Fraction(1, 4)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    lambda_rug: float = 1e-3
    epoch_aug_set: frozenset = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eval_train_cap: int = 600  # per-epoch train-metric subsample (final epoch full)

    def __post_init__(self):
        if self.lambda_rug < 0:
            raise ValueError("lambda_rug must be nonnegative")
        if self.epoch_aug_set is None:
            self.epoch_aug_set = frozenset(range(70, self.epochs + 1))
        self.epoch_aug_set = frozenset(int(e) for e in self.epoch_aug_set)
        if any(e < 1 or e > self.epochs for e in self.epoch_aug_set):
            raise ValueError("epoch_aug_set must lie within [1, epochs]")

    def canonical(self):
        return (f"gamma={self.gamma};epochs={self.epochs};batch={self.batch_size};"
                f"lr={self.lr};lambda_rug={self.lambda_rug};"
                f"aug={sorted(self.epoch_aug_set)};seed={self.seed};"
                f"betas={self.beta1},{self.beta2}")


def config_hash(train_cfg, codec_cfg):
    text = train_cfg.canonical() + "|" + repr(codec_cfg)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict              # name -> np.ndarray
    buffers: dict             # name -> {"mean": ..., "var": ...}
    opt_state: dict | None
    epoch: int
    rng_state: dict | None
    cfg_hash: str
    gamma: Fraction

    def apply_to(self, codec):
        tensors = codec.parameters()
        if set(tensors) != set(self.params):
            raise CheckpointError("parameter names do not match the model")
        for name, t in tensors.items():
            t.data = self.params[name].copy()
        for name, stats in codec.buffers().items():
            stats.load(self.buffers[name])


def snapshot(codec, opt=None, epoch=0, rng=None, cfg_hash="", gamma=None):
    params = {n: t.data.copy() for n, t in codec.parameters().items()}
    buffers = {n: b.state() for n, b in codec.buffers().items()}
    rng_state = None
    if rng is not None:
        st = rng.bit_generator.state
        rng_state = {"name": st["bit_generator"],
                     "state": int(st["state"]["state"]),
                     "inc": int(st["state"]["inc"])}
    return Checkpoint(params, buffers, opt.state() if opt else None,
                      epoch, rng_state, cfg_hash, gamma)


_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


def _pack_array(name, arr):
    nb = name.encode()
    arr = np.ascontiguousarray(arr)
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<B", {"<f4": 0, "<f8": 1}[arr.dtype.newbyteorder("<").str])
    head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.off = 0

    def take(self, n):
        out = self.raw[self.off:self.off + n]
        if len(out) != n:
            raise CheckpointError("truncated checkpoint")
        self.off += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self):
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode()
        (code,) = self.unpack("<B")
        dtype = {0: "<f4", 1: "<f8"}[code]
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(count * int(dtype[-1])), dtype=dtype)
        return name, arr.reshape(shape).copy()


def save_checkpoint(path, ckpt):
    blob = [_CKPT_MAGIC, struct.pack("<I", _CKPT_VERSION)]
    blob.append(struct.pack("<16s", ckpt.cfg_hash.encode()[:16].ljust(16)))
    blob.append(struct.pack("<I", ckpt.epoch))
    blob.append(struct.pack("<II", ckpt.gamma.numerator, ckpt.gamma.denominator))
    if ckpt.rng_state:
        blob.append(struct.pack("<B", 1))
        blob.append(struct.pack("<QQ",
                                ckpt.rng_state["state"] & (2 ** 64 - 1),
                                ckpt.rng_state["inc"] & (2 ** 64 - 1)))
        blob.append(struct.pack("<QQ",
                                (ckpt.rng_state["state"] >> 64) & (2 ** 64 - 1),
                                (ckpt.rng_state["inc"] >> 64) & (2 ** 64 - 1)))
    else:
        blob.append(struct.pack("<B", 0))

    blob.append(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        blob.append(_pack_array(name, ckpt.params[name]))
    blob.append(struct.pack("<I", len(ckpt.buffers)))
    for name in sorted(ckpt.buffers):
        blob.append(_pack_array(name + "#mean", ckpt.buffers[name]["mean"]))
        blob.append(_pack_array(name + "#var", ckpt.buffers[name]["var"]))
    if ckpt.opt_state:
        blob.append(struct.pack("<B", 1))
        blob.append(struct.pack("<Q", ckpt.opt_state["step"]))
        blob.append(struct.pack("<I", len(ckpt.opt_state["m"])))
        for name in sorted(ckpt.opt_state["m"]):
            blob.append(_pack_array(name + "#m", ckpt.opt_state["m"][name]))
            blob.append(_pack_array(name + "#v", ckpt.opt_state["v"][name]))
    else:
        blob.append(struct.pack("<B", 0))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_checkpoint(path, expected_hash=None, force=False):
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_hash = reader.take(16).decode().strip()
    (epoch,) = reader.unpack("<I")
    num, den = reader.unpack("<II")
    gamma = Fraction(num, den)
    (has_rng,) = reader.unpack("<B")
    rng_state = None
    if has_rng:
        lo_s, lo_i = reader.unpack("<QQ")
        hi_s, hi_i = reader.unpack("<QQ")
        rng_state = {"name": "PCG64", "state": (hi_s << 64) | lo_s,
                     "inc": (hi_i << 64) | lo_i}
    if expected_hash is not None and cfg_hash != expected_hash and not force:
        raise CheckpointError(
            f"config hash mismatch ({cfg_hash} != {expected_hash}); "
            "pass force=True to load anyway")
    (n_params,) = reader.unpack("<I")
    params = dict(reader.array() for _ in range(n_params))
    (n_buf,) = reader.unpack("<I")
    buffers = {}
    for _ in range(n_buf):
        name_m, mean = reader.array()
        _, var = reader.array()
        buffers[name_m[:-5]] = {"mean": mean, "var": var}
    (has_opt,) = reader.unpack("<B")
    opt_state = None
    if has_opt:
        (step,) = reader.unpack("<Q")
        (n_opt,) = reader.unpack("<I")
        m, v = {}, {}
        for _ in range(n_opt):
            name_m, arr_m = reader.array()
            _, arr_v = reader.array()
            m[name_m[:-2]] = arr_m
            v[name_m[:-2]] = arr_v
        opt_state = {"m": m, "v": v, "step": step}
    return Checkpoint(params, buffers, opt_state, epoch, rng_state, cfg_hash, gamma)


def restore_rng(rng_state):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": rng_state["state"], "inc": rng_state["inc"]},
        "has_uint32": 0, "uinteger": 0,
    }
    return rng


# ---------------------------------------------------------------------------
# Batched inference helpers


def _planes_to_input(planes):
    """(N, 2, n, n) float planes -> complex input tensor (2, N, 1, n, n)."""
    arr = np.asarray(planes)
    return eg.constant(np.ascontiguousarray(
        arr.transpose(1, 0, 2, 3)[:, :, None, :, :]))


def evaluate(codec, dataset, gamma, batch_size=256, with_rho=False,
             transform=None):
    """Eval-mode pass: reconstructions, logits, physical NMSE, F1, rho."""
    n = len(dataset)
    preds = np.empty_like(dataset.planes)
    logits = np.empty((n, 7), dtype=np.float64)
    for lo in range(0, n, batch_size):
        hi = min(n, lo + batch_size)
        x = _planes_to_input(dataset.planes[lo:hi])
        cw, h_hat, _ = codec.forward(x, gamma, bn_mode="eval", training=False)
        preds[lo:hi] = h_hat.data
        logits[lo:hi] = cw.class_logits.data
    report = metrics.RunReport()
    report.nmse_db = metrics.nmse_db_planes(dataset.planes, preds,
                                            dataset.norm_stats)
    if dataset.labeled:
        pred_labels = metrics.predictions_from_logits(logits)
        report.of1, report.cf1 = metrics.f1_scores(pred_labels, dataset.labels)
    if with_rho:
        tr = transform
        from . import adcrm as _adcrm
        t_cplx = _adcrm.denormalize(dataset.planes, dataset.norm_stats)
        p_cplx = _adcrm.denormalize(preds, dataset.norm_stats)
        h_true = np.stack([tr.from_truncated(t_cplx[i]) for i in range(n)])
        h_pred = np.stack([tr.from_truncated(p_cplx[i]) for i in range(n)])
        report.rho, _ = metrics.rho(h_true, h_pred)
    report.param_count = metrics.param_count(codec)
    return report, preds, logits


# ---------------------------------------------------------------------------
# Training loop


def fit(train_set, test_set, cfg, codec_cfg=None, progress=None):
    """Train a codec on one compression rate; returns (best checkpoint,
    per-epoch reports, codec in its final state)."""
    if train_set.norm_stats != test_set.norm_stats:
        raise ValueError("train and test sets must share normalisation stats")
    codec_cfg = codec_cfg or CodecConfig()
    codec = HybridCodec(codec_cfg, seed=cfg.seed)
    chash = config_hash(cfg, codec_cfg)
    opt = Adam(codec.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7EA1)))

    targets = np.asarray(train_set.planes)
    labels = train_set.labels
    n = len(train_set)
    reports = []
    best = None
    best_nmse = float("inf")

    probe_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE7A1)))
    if n > cfg.eval_train_cap:
        probe_idx = np.sort(probe_rng.choice(n, size=cfg.eval_train_cap,
                                             replace=False))
        train_probe = train_set.subset(probe_idx)
    else:
        train_probe = train_set

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        lr_scale = cosine_lr_scale(epoch, cfg.epochs)
        want_aug = epoch in cfg.epoch_aug_set
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs at least two samples
            x = _planes_to_input(targets[idx])
            y = eg.constant(targets[idx])
            with eg.tape() as tp:
                cw, h_hat, h_tilde = codec.forward(
                    x, cfg.gamma, bn_mode="train", training=want_aug, rng=rng)
                l_r = loss_regression(h_hat, y)
                l_aug = loss_aug(h_tilde, y) if want_aug else None
                l_c = loss_classification(cw.class_logits, labels[idx])
                loss = offline_objective(l_r, l_c, l_aug, epoch, cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}")
            opt.step(tp.backward(loss), lr_scale)
            epoch_loss += value
            batches += 1

        probe = train_set if epoch == cfg.epochs else train_probe
        train_rep, _, _ = evaluate(codec, probe, cfg.gamma)
        test_rep, _, _ = evaluate(codec, test_set, cfg.gamma)
        report = metrics.RunReport(
            nmse_db=test_rep.nmse_db,
            ggap_db=metrics.ggap_db(train_rep.nmse_db, test_rep.nmse_db),
            of1=test_rep.of1, cf1=test_rep.cf1,
            param_count=metrics.param_count(codec),
            extras={"epoch": epoch,
                    "train_nmse_db": train_rep.nmse_db,
                    "train_of1": train_rep.of1,
                    "mean_loss": epoch_loss / max(1, batches),
                    "lr_scale": lr_scale},
        )
        reports.append(report)
        if progress:
            progress(epoch, report)
        if test_rep.nmse_db < best_nmse:
            best_nmse = test_rep.nmse_db
            best = snapshot(codec, opt, epoch, rng, chash, cfg.gamma)

    return best, reports, codec
