"""Hybrid codec: peak-indication + classification + two dense feature codes.

The encoder front end runs two parallel complex convolutions; one branch
feeds the quadrant peak report, the other (viewed as real planes) feeds a
supervised head (classification-regularised) and an unsupervised head whose
flattened features are compressed by per-rate dense layers. The decoder
expands the dense codes, gates them with indicator maps derived from the
class logits, fuses a deep complex upsampling path with a direct transposed
convolution path, and refines the sum.

Codeword accounting at spatial size n (tau' = theta = n):
    S = gamma * 2 * n * n,
    peaks 16 | class logits 7 | supervised S/2-7 | unsupervised S/2-16.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import engine as eg
from .blocks import (AugmentParams, Block, BatchNorm, ComplexConv, Conv,
                     Dense, RefineBlock, TConv, UpBlock, augment)
from .csra import CsraConfig, ResidualAttentionClassifier


class ConfigError(Exception):
    pass


GAMMA_CODES = {Fraction(1, 4): 0, Fraction(1, 8): 1,
               Fraction(1, 16): 2, Fraction(1, 32): 3}
CODE_GAMMAS = {v: k for k, v in GAMMA_CODES.items()}


def parse_gamma(text):
    """Accept '1/16' style rationals (also 0.25 style decimals)."""
    try:
        if "/" in str(text):
            num, den = str(text).split("/")
            return Fraction(int(num), int(den))
        return Fraction(str(text)).limit_denominator(1024)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad compression rate {text!r}") from exc


def codeword_length(gamma, spatial):
    s = gamma * 2 * spatial * spatial
    if s.denominator != 1:
        raise ConfigError(f"rate {gamma} gives non-integer codeword length")
    s = int(s)
    if s % 2 or s // 2 - 16 <= 0:
        raise ConfigError(
            f"rate {gamma} at {spatial}x{spatial} leaves no room for both "
            "deterministic code segments")
    return s


@dataclass(frozen=True)
class CodecConfig:
    spatial: int = 32
    gammas: tuple = (Fraction(1, 4), Fraction(1, 8), Fraction(1, 16), Fraction(1, 32))
    stem_scatter_channels: int = 2
    stem_feature_channels: int = 4        # complex; 8 real planes downstream
    head_mid_channels: int = 16
    head_out_channels: int = 8
    csra_channels: int = 32
    deep_channels: tuple = (8, 4, 2)      # complex chain through the up blocks
    direct_channels: tuple = (16, 8, 4)   # real transposed-conv chain
    augment: AugmentParams = field(default_factory=AugmentParams)
    csra: CsraConfig = field(default_factory=CsraConfig)
    background: float = 0.5               # min-max normalisation centre
    decoder_init_gain: float = 0.25       # quiet-start scale on decoder weights

    def __post_init__(self):
        if self.spatial % 4:
            raise ConfigError("spatial size must be divisible by 4")
        for g in self.gammas:
            codeword_length(g, self.spatial)

    @property
    def quadrant(self):
        return self.spatial // 2

    @property
    def index_divisor(self):
        # 16x16 quadrants at the reference size -> flat indices 0..255
        return self.quadrant * self.quadrant - 1

    @property
    def feature_dim(self):
        # flattened head output: head_out_channels at spatial/4
        return self.head_out_channels * (self.spatial // 4) ** 2

    def lengths(self, gamma):
        s = codeword_length(gamma, self.spatial)
        return s, s // 2 - 7, s // 2 - 16


@dataclass
class Codeword:
    """One reported feedback vector (batch-major arrays)."""

    scatter: object        # (N, 16) peaks then normalised indices
    class_logits: object   # (N, 7)
    sup: object            # (N, S/2 - 7)
    unsup: object          # (N, S/2 - 16)
    gamma: Fraction

    @property
    def total_length(self):
        return (self.scatter.shape[1] + self.class_logits.shape[1]
                + self.sup.shape[1] + self.unsup.shape[1])

    def to_arrays(self):
        return tuple(np.asarray(p.data if isinstance(p, eg.Tensor) else p)
                     for p in (self.scatter, self.class_logits, self.sup, self.unsup))


def serialize_codewords(cw):
    """Wire format: u16 S, u8 rate code, then f32 segments per sample."""
    if cw.gamma not in GAMMA_CODES:
        raise ConfigError(f"rate {cw.gamma} has no wire code")
    parts = cw.to_arrays()
    s = cw.total_length
    out = [struct.pack("<HB", s, GAMMA_CODES[cw.gamma])]
    n = parts[0].shape[0]
    for i in range(n):
        for p in parts:
            out.append(p[i].astype("<f4").tobytes())
    return b"".join(out)


def deserialize_codewords(raw, spatial=32):
    s, code = struct.unpack_from("<HB", raw, 0)
    gamma = CODE_GAMMAS.get(code)
    if gamma is None:
        raise ConfigError(f"unknown rate code {code}")
    if s != codeword_length(gamma, spatial):
        raise ConfigError("codeword length does not match its rate code")
    body = np.frombuffer(raw, dtype="<f4", offset=3).reshape(-1, s)
    sup_len = s // 2 - 7
    return Codeword(
        scatter=body[:, :16].copy(),
        class_logits=body[:, 16:23].copy(),
        sup=body[:, 23:23 + sup_len].copy(),
        unsup=body[:, 23 + sup_len:].copy(),
        gamma=gamma,
    )


def quantize_codeword(cw, bits):
    """Optional uniform mid-rise quantizer on [0,1]-clamped segments."""
    if bits == 0:
        return cw
    if not 4 <= bits <= 16:
        raise ConfigError("quantizer depth must be 0 (off) or 4..16")
    levels = 1 << bits

    def q(part):
        arr = np.asarray(part.data if isinstance(part, eg.Tensor) else part)
        clipped = np.clip(arr, 0.0, 1.0)
        cells = np.minimum((clipped * levels).astype(np.int64), levels - 1)
        return ((cells + 0.5) / levels).astype(arr.dtype)

    return Codeword(q(cw.scatter), q(cw.class_logits), q(cw.sup), q(cw.unsup),
                    cw.gamma)


# ---------------------------------------------------------------------------
# Indicator maps


def scatterer_indication(scatter_map, config):
    """Quadrant peak report from the magnitude of the scatter feature map.

    scatter_map: complex (2, N, 2, n, n). Four n/2-size quadrants per channel
    (near/far delay x small/large angle, row-major) each report their peak
    magnitude and its row-major flat index inside the quadrant, normalised
    by the largest index. Returns (N, 16): 8 peaks then 8 indices.
    """
    mag = eg.magnitude(scatter_map)  # (N, 2, n, n)
    vals, idx = eg.max_pool_with_index(mag, (config.quadrant, config.quadrant))
    n = mag.shape[0]
    peaks = eg.reshape(vals, (n, 8))
    norm_idx = idx.reshape(n, 8).astype(mag.dtype) / config.index_divisor
    return eg.concat([peaks, eg.constant(norm_idx)], axis=1)


def decode_peak_positions(scatter, config):
    """Recover absolute (channel, row, col) placements from a peak report."""
    arr = np.asarray(scatter.data if isinstance(scatter, eg.Tensor) else scatter)
    q = config.quadrant
    idx = np.rint(np.clip(arr[:, 8:], 0.0, 1.0) * config.index_divisor).astype(np.int64)
    rows_q, cols_q = idx // q, idx % q
    quad = np.tile(np.arange(4), 2)  # ch0 q1..q4, ch1 q1..q4
    row_off = (quad // 2) * q
    col_off = (quad % 2) * q
    rows = rows_q + row_off[None, :]
    cols = cols_q + col_off[None, :]
    return rows, cols


def unpool_peaks(scatter, config):
    """Scatter reported peaks back onto the grid; channels average.

    Returns (N, 1, n, n); coincident placements within a channel sum.
    """
    arr = np.asarray(scatter.data if isinstance(scatter, eg.Tensor) else scatter)
    if not np.isfinite(arr[:, :8]).all():
        raise eg.EngineError("corrupt indication: non-finite peak values")
    n_batch = arr.shape[0]
    size = config.spatial
    rows, cols = decode_peak_positions(scatter, config)
    chan = np.repeat(np.array([0, 1]), 4)
    flat = (np.arange(n_batch)[:, None] * 2 * size * size
            + chan[None, :] * size * size + rows * size + cols)
    peaks = scatter if isinstance(scatter, eg.Tensor) else eg.constant(arr)
    values = eg.reshape(eg.slice_axis(peaks, 1, 0, 8), (-1,))
    maps = eg.scatter_fixed(values, flat.reshape(-1), (n_batch, 2, size, size))
    return eg.reshape(eg.tmean(maps, axis=1, keepdims=True),
                      (n_batch, 1, size, size))


def star_mask(scatter, config):
    """Binary stencil union around every reported peak position.

    Stencils per peak: 3x3 square, 1x9 horizontal strip, 7x1 vertical strip,
    clipped at the borders. Peak values are ignored: a zero report still
    stencils position 0 of each quadrant. Returns (N, 1, n, n) float32 with
    1 = preserve, 0 = free to synthesize.
    """
    arr = np.asarray(scatter.data if isinstance(scatter, eg.Tensor) else scatter)
    n_batch = arr.shape[0]
    size = config.spatial
    rows, cols = decode_peak_positions(scatter, config)
    mask = np.zeros((n_batch, 1, size, size), dtype=np.float32)
    for i in range(n_batch):
        for p in range(8):
            r, c = int(rows[i, p]), int(cols[i, p])
            mask[i, 0, max(0, r - 1):r + 2, max(0, c - 1):c + 2] = 1.0
            mask[i, 0, r, max(0, c - 4):c + 5] = 1.0
            mask[i, 0, max(0, r - 3):r + 4, c] = 1.0
    return mask


class ClassGate(Block):
    """Dense map of the class logits to a mean-one feature gate."""

    def __init__(self, dim, rng, dtype=np.float32):
        super().__init__()
        self.fc = self._child("fc", Dense(7, dim, rng, dtype))
        self.dim = dim

    def __call__(self, logits):
        return eg.mul(eg.softmax(self.fc(logits), axis=-1), float(self.dim))


class PriorMap(Block):
    """Rank-1 delay/angle score grid from the class logits."""

    def __init__(self, spatial, rng, dtype=np.float32):
        super().__init__()
        self.delay = self._child("delay", Dense(7, spatial, rng, dtype))
        self.angle = self._child("angle", Dense(7, spatial, rng, dtype))
        self.spatial = spatial

    def __call__(self, logits):
        fd = eg.softmax(self.delay(logits), axis=-1)  # (N, n)
        fa = eg.softmax(self.angle(logits), axis=-1)
        n = fd.shape[0]
        return eg.mul(eg.reshape(fd, (n, self.spatial, 1)),
                      eg.reshape(fa, (n, 1, self.spatial)))


# ---------------------------------------------------------------------------
# Encoder / decoder


class _Head(Block):
    """Two stride-2 convs with batch norm; flattens to the feature vector."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__()
        cin = 2 * config.stem_feature_channels
        self.c1 = self._child("c1", Conv(cin, config.head_mid_channels, 3, 2, 1, rng, dtype))
        self.n1 = self._child("n1", BatchNorm(config.head_mid_channels, dtype))
        self.c2 = self._child("c2", Conv(config.head_mid_channels,
                                         config.head_out_channels, 3, 2, 1, rng, dtype))
        self.n2 = self._child("n2", BatchNorm(config.head_out_channels, dtype))

    def __call__(self, x, bn_mode):
        y = eg.relu(self.n1(self.c1(x), bn_mode))
        return eg.relu(self.n2(self.c2(y), bn_mode))


class Encoder(Block):
    def __init__(self, config, rng, dtype=np.float32):
        super().__init__()
        self.config = config
        self.stem_scatter = self._child(
            "stem_scatter", ComplexConv(1, config.stem_scatter_channels, 3, 1, 1, rng, dtype))
        self.stem_feature = self._child(
            "stem_feature", ComplexConv(1, config.stem_feature_channels, 3, 1, 1, rng, dtype))
        self.sup_head = self._child("sup_head", _Head(config, rng, dtype))
        self.unsup_head = self._child("unsup_head", _Head(config, rng, dtype))
        self.csra_proj = self._child(
            "csra_proj", Conv(config.head_out_channels, config.csra_channels, 1, 1, 0, rng, dtype))
        self.classifier = self._child(
            "classifier", ResidualAttentionClassifier(config.csra_channels, rng,
                                                      config.csra, dtype))
        self.squeeze = {}
        for g in config.gammas:
            _, sup_len, unsup_len = config.lengths(g)
            pair = Block()
            pair.sup = pair._child("sup", Dense(config.feature_dim, sup_len, rng, dtype))
            pair.unsup = pair._child("unsup", Dense(config.feature_dim, unsup_len, rng, dtype))
            self.squeeze[g] = self._child(f"squeeze.{g.denominator}", pair)

        # the scatter stem opens as a near-identity filter so the quadrant
        # peak report reflects true channel peaks before any training
        st = self.stem_scatter
        st.w.data *= 0.05
        centre = st.w.data.shape[-1] // 2
        st.w.data[0, 0, 0, centre, centre] += 1.0
        if config.stem_scatter_channels > 1:
            st.w.data[1, 1, 0, centre, centre] += 1.0

        # cancel the constant normalisation background at the stems so the
        # front end responds to channel structure from the first step
        for stem in (self.stem_scatter, self.stem_feature):
            stem.b.data[0] = -config.background * stem.w.data[0].sum(axis=(1, 2, 3))
            stem.b.data[1] = -config.background * stem.w.data[1].sum(axis=(1, 2, 3))

    def class_logits(self, h, bn_mode):
        """Classification sub-path only (front end -> supervised head -> logits)."""
        feat = eg.complex_to_channels(self.stem_feature(h))
        m_sup = self.sup_head(feat, bn_mode)
        return self.classifier(self.csra_proj(m_sup))

    def __call__(self, h, gamma, bn_mode="eval"):
        """h: complex (2, N, 1, n, n) normalised input."""
        if gamma not in self.squeeze:
            raise ConfigError(f"rate {gamma} was not configured")
        cfg = self.config
        scatter_map = self.stem_scatter(h)
        feat = eg.complex_to_channels(self.stem_feature(h))  # (N, 8, n, n)

        m_sup = self.sup_head(feat, bn_mode)       # (N, 8, n/4, n/4)
        m_unsup = self.unsup_head(feat, bn_mode)
        x_sup = eg.reshape(m_sup, (m_sup.shape[0], -1))
        x_unsup = eg.reshape(m_unsup, (m_unsup.shape[0], -1))

        logits = self.classifier(self.csra_proj(m_sup))
        pair = self.squeeze[gamma]
        return Codeword(
            scatter=scatterer_indication(scatter_map, cfg),
            class_logits=logits,
            sup=pair.sup(x_sup),
            unsup=pair.unsup(eg.add(x_unsup, x_sup)),
            gamma=gamma,
        )


class Decoder(Block):
    def __init__(self, config, rng, dtype=np.float32):
        super().__init__()
        self.config = config
        dim = config.feature_dim
        self.class_gate = self._child("class_gate", ClassGate(dim, rng, dtype))
        self.prior = self._child("prior", PriorMap(config.spatial, rng, dtype))
        d0, d1, d2 = config.deep_channels
        self.deep1 = self._child("deep1", UpBlock(d0, d1, rng, dtype))
        self.deep2 = self._child("deep2", UpBlock(d1, d2, rng, dtype))
        r0, r1, r2 = config.direct_channels
        self.direct1 = self._child("direct1", TConv(r0, r1, 4, 2, 1, rng, dtype))
        self.direct2 = self._child("direct2", TConv(r1, r2, 4, 2, 1, rng, dtype))
        self.refine = self._child("refine", RefineBlock(2 * d2, rng, dtype=dtype))
        self.expand = {}
        for g in config.gammas:
            _, sup_len, unsup_len = config.lengths(g)
            pair = Block()
            pair.sup = pair._child("sup", Dense(sup_len, dim, rng, dtype))
            pair.unsup = pair._child("unsup", Dense(unsup_len, dim, rng, dtype))
            self.expand[g] = self._child(f"expand.{g.denominator}", pair)

        # quiet start: the reconstruction opens exactly at the normalisation
        # background (zero final projection) instead of fighting its own
        # initialisation noise through the layer-norm variance pump
        if config.decoder_init_gain != 1.0:
            for name, t in self.parameters().items():
                if name.endswith("w"):
                    t.data *= config.decoder_init_gain
        self.refine.pw2.w.data[:] = 0.0
        self.refine.pw2.b.data[:] = config.background

    def __call__(self, cw, training=False, rng=None, gt_mask=None):
        """Decode a codeword batch.

        Returns (h_hat, h_tilde): (N, 2, n, n) real-view reconstructions;
        ``h_tilde`` is the feature-jittered variant, None outside training.
        The class logits enter through a stop-gradient: the classifier is
        supervised only by its own objective.
        """
        if cw.gamma not in self.expand:
            raise ConfigError(f"decoder lacks rate {cw.gamma}")
        cfg = self.config
        n = cw.class_logits.shape[0]
        quarter = cfg.spatial // 4

        logits = cw.class_logits
        if isinstance(logits, eg.Tensor):
            logits = eg.stop_gradient(logits)
        else:
            logits = eg.constant(logits)
        scatter = cw.scatter if isinstance(cw.scatter, eg.Tensor) \
            else eg.constant(cw.scatter)
        sup = cw.sup if isinstance(cw.sup, eg.Tensor) else eg.constant(cw.sup)
        unsup = cw.unsup if isinstance(cw.unsup, eg.Tensor) else eg.constant(cw.unsup)

        f_peaks = unpool_peaks(scatter, cfg)           # (N,1,n,n)
        f_gate = self.class_gate(logits)               # (N, dim)
        f_prior = self.prior(logits)                   # (N,n,n)

        pair = self.expand[cw.gamma]
        x_sup = eg.mul(pair.sup(sup), f_gate)
        x_unsup = pair.unsup(unsup)
        z = eg.concat([x_unsup, x_sup], axis=1)        # (N, 2*dim)
        z = eg.reshape(z, (n, cfg.direct_channels[0], quarter, quarter))

        deep = eg.channels_to_complex(z)               # (2,N,8,q,q)
        deep = self.deep2(self.deep1(deep))            # (2,N,2,n,n)
        gate = eg.reshape(eg.add(f_prior, 1.0), (1, n, 1, cfg.spatial, cfg.spatial))
        deep = eg.mul(deep, gate)
        if gt_mask is not None:
            deep = eg.mul(deep, eg.constant(
                gt_mask.reshape((1,) + gt_mask.shape)))
        deep_real = eg.complex_to_channels(deep)       # (N,4,n,n)

        direct = eg.relu(self.direct1(z))
        direct = self.direct2(direct)                  # (N,4,n,n)
        m_direct = eg.add(direct, deep_real)

        h_hat = self.refine(eg.add(m_direct, f_peaks))
        h_tilde = None
        if training:
            jittered = augment(m_direct, cfg.augment, rng, training=True)
            h_tilde = self.refine(eg.add(jittered, f_peaks))
        return h_hat, h_tilde


class HybridCodec(Block):
    """Encoder/decoder pair sharing one configuration."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        super().__init__()
        self.config = config or CodecConfig()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DEC)))
        self.encoder = self._child("encoder", Encoder(self.config, rng, dtype))
        self.decoder = self._child("decoder", Decoder(self.config, rng, dtype))

    def forward(self, h, gamma, bn_mode="eval", training=False, rng=None,
                gt_mask=None):
        cw = self.encoder(h, gamma, bn_mode)
        h_hat, h_tilde = self.decoder(cw, training=training, rng=rng,
                                      gt_mask=gt_mask)
        return cw, h_hat, h_tilde
