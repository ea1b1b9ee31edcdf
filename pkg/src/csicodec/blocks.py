"""Reusable network blocks.

Complex feature maps follow the engine convention: a leading axis of size 2
holds the real and imaginary planes, so shapes read (2, N, C, H, W).
Attention gates are computed from the magnitude map only and multiply both
planes identically, which keeps every gate phase-preserving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg


class Block:
    """Named parameter container; children compose with dotted prefixes."""

    def __init__(self):
        self._params = {}
        self._children = {}
        self._buffers = {}

    def _add(self, name, arr):
        t = eg.param(arr)
        self._params[name] = t
        return t

    def _child(self, name, block):
        self._children[name] = block
        return block

    def parameters(self, prefix=""):
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for name, child in self._children.items():
            out.update(child.parameters(prefix + name + "."))
        return out

    def buffers(self, prefix=""):
        out = {}
        for name, b in self._buffers.items():
            out[prefix + name] = b
        for name, child in self._children.items():
            out.update(child.buffers(prefix + name + "."))
        return out

    def param_count(self):
        return sum(t.size for t in self.parameters().values())


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)


def attention_reduce(channels, preferred=4):
    """Largest divisor of ``channels`` not exceeding the preferred ratio."""
    for r in (preferred, 2, 1):
        if channels % r == 0:
            return r
    return 1


class ComplexConv(Block):
    def __init__(self, cin, cout, k, stride, pad, rng, dtype=np.float32):
        super().__init__()
        fan = cin * k * k * 2
        self.w = self._add("w", _he(rng, (2, cout, cin, k, k), fan, dtype))
        self.b = self._add("b", np.zeros((2, cout), dtype=dtype))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        y = eg.complex_conv2d(x, self.w, self.stride, self.pad)
        return eg.add(y, eg.reshape(self.b, (2, 1, -1, 1, 1)))


class ComplexTConv(Block):
    def __init__(self, cin, cout, k, stride, pad, rng, dtype=np.float32):
        super().__init__()
        fan = cin * k * k * 2
        self.w = self._add("w", _he(rng, (2, cin, cout, k, k), fan, dtype))
        self.b = self._add("b", np.zeros((2, cout), dtype=dtype))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        y = eg.complex_transposed_conv2d(x, self.w, self.stride, self.pad)
        return eg.add(y, eg.reshape(self.b, (2, 1, -1, 1, 1)))


class Conv(Block):
    def __init__(self, cin, cout, k, stride, pad, rng, dtype=np.float32):
        super().__init__()
        self.w = self._add("w", _he(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.b = self._add("b", np.zeros(cout, dtype=dtype))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        y = eg.conv2d(x, self.w, self.stride, self.pad)
        return eg.add(y, eg.reshape(self.b, (1, -1, 1, 1)))


class TConv(Block):
    def __init__(self, cin, cout, k, stride, pad, rng, dtype=np.float32):
        super().__init__()
        self.w = self._add("w", _he(rng, (cin, cout, k, k), cin * k * k, dtype))
        self.b = self._add("b", np.zeros(cout, dtype=dtype))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        y = eg.conv2d_transpose(x, self.w, self.stride, self.pad)
        return eg.add(y, eg.reshape(self.b, (1, -1, 1, 1)))


class Dense(Block):
    def __init__(self, nin, nout, rng, dtype=np.float32):
        super().__init__()
        self.w = self._add("w", _he(rng, (nout, nin), nin, dtype))
        self.b = self._add("b", np.zeros(nout, dtype=dtype))

    def __call__(self, x):
        return eg.dense(x, self.w, self.b)


class BatchNorm(Block):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.gamma = self._add("gamma", np.ones(channels, dtype=dtype))
        self.beta = self._add("beta", np.zeros(channels, dtype=dtype))
        self.stats = eg.RunningStats(channels, dtype=dtype)
        self._buffers["stats"] = self.stats

    def __call__(self, x, mode):
        return eg.batchnorm(x, self.gamma, self.beta, self.stats, mode)


class DualAttention(Block):
    """Channel and spatial sigmoid gates driven by the complex magnitude."""

    def __init__(self, channels, rng, reduce=None, spatial_k=3, dtype=np.float32):
        super().__init__()
        r = reduce or attention_reduce(channels)
        hidden = max(1, channels // r)
        self.fc1 = self._child("fc1", Dense(channels, hidden, rng, dtype))
        self.fc2 = self._child("fc2", Dense(hidden, channels, rng, dtype))
        self.sp = self._child("sp", Conv(1, 1, spatial_k, 1, spatial_k // 2, rng, dtype))

    def __call__(self, x):
        m = eg.magnitude(x)  # (N,C,H,W)
        d_ch = eg.tmean(m, axis=(2, 3))  # (N,C)
        g_ch = eg.sigmoid(self.fc2(eg.relu(self.fc1(d_ch))))
        n, c = g_ch.shape
        g_ch = eg.reshape(g_ch, (1, n, c, 1, 1))

        d_sp = eg.tmean(m, axis=1, keepdims=True)  # (N,1,H,W)
        g_sp = eg.sigmoid(self.sp(d_sp))
        g_sp = eg.reshape(g_sp, (1,) + g_sp.shape)

        return eg.mul(eg.mul(x, g_ch), g_sp)


class SelectiveFusion(Block):
    """Multi-branch fusion: per-channel softmax selection plus residual."""

    def __init__(self, channels, n_branches, rng, reduce=None, dtype=np.float32):
        super().__init__()
        r = reduce or attention_reduce(channels)
        hidden = max(1, channels // r)
        self.squeeze = self._child("squeeze", Dense(channels, hidden, rng, dtype))
        self.heads = [
            self._child(f"head{i}", Dense(hidden, channels, rng, dtype))
            for i in range(n_branches)
        ]

    def selection_weights(self, branches):
        s = branches[0]
        for b in branches[1:]:
            s = eg.add(s, b)
        d = eg.tmean(eg.magnitude(s), axis=(2, 3))  # (N,C)
        z = eg.relu(self.squeeze(d))
        logits = [eg.reshape(h(z), (-1, 1, d.shape[1])) for h in self.heads]
        return eg.softmax(eg.concat(logits, axis=1), axis=1)  # (N,B,C)

    def __call__(self, branches, residual):
        if len(branches) < 2:
            raise eg.DimensionError("selective fusion needs at least two branches")
        shapes = {b.shape for b in branches}
        if len(shapes) != 1:
            raise eg.DimensionError("selective fusion branches must share a shape")
        weights = self.selection_weights(branches)
        n, _, c = weights.shape
        out = residual
        for i, b in enumerate(branches):
            w_i = eg.reshape(eg.slice_axis(weights, 1, i, i + 1), (1, n, c, 1, 1))
            out = eg.add(out, eg.mul(b, w_i))
        return out


class DownBlock(Block):
    """Complex stride-2 conv, CReLU, dual attention, selective fusion."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = self._child("conv", ComplexConv(cin, cout, 3, 2, 1, rng, dtype))
        self.att = self._child("att", DualAttention(cout, rng, dtype=dtype))
        self.b3 = self._child("b3", ComplexConv(cout, cout, 3, 1, 1, rng, dtype))
        self.b5 = self._child("b5", ComplexConv(cout, cout, 5, 1, 2, rng, dtype))
        self.fuse = self._child("fuse", SelectiveFusion(cout, 2, rng, dtype=dtype))

    def __call__(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise eg.DimensionError("down block needs even spatial extents")
        y = eg.relu(self.conv(x))
        y = self.att(y)
        return self.fuse([self.b3(y), self.b5(y)], y)


class UpBlock(Block):
    """Mirror of ``DownBlock`` with an exact-doubling transposed conv."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = self._child("conv", ComplexTConv(cin, cout, 4, 2, 1, rng, dtype))
        self.att = self._child("att", DualAttention(cout, rng, dtype=dtype))
        self.b3 = self._child("b3", ComplexConv(cout, cout, 3, 1, 1, rng, dtype))
        self.b5 = self._child("b5", ComplexConv(cout, cout, 5, 1, 2, rng, dtype))
        self.fuse = self._child("fuse", SelectiveFusion(cout, 2, rng, dtype=dtype))

    def __call__(self, x):
        y = eg.relu(self.conv(x))
        y = self.att(y)
        return self.fuse([self.b3(y), self.b5(y)], y)


@dataclass(frozen=True)
class AugmentParams:
    """Gaussian feature jitter scales; the two deviations stay equal."""

    sigma_alpha: float = 0.1
    sigma_beta: float = 0.1

    def __post_init__(self):
        if self.sigma_alpha < 0 or self.sigma_beta < 0:
            raise ValueError("augmentation scales must be nonnegative")
        if self.sigma_alpha != self.sigma_beta:
            raise ValueError("augmentation scales must be equal")


def augment(x, params, rng, training):
    """Multiplicative/additive Gaussian jitter: alpha * x + beta, with
    alpha ~ N(1, sigma^2) and beta ~ N(0, sigma^2) per element. Identity in
    eval mode or at sigma 0 (no rng draw in either case)."""
    if not training or (params.sigma_alpha == 0.0 and params.sigma_beta == 0.0):
        return x
    alpha = 1.0 + params.sigma_alpha * rng.standard_normal(x.shape)
    beta = params.sigma_beta * rng.standard_normal(x.shape)
    alpha = alpha.astype(x.dtype)
    beta = beta.astype(x.dtype)
    return eg.add(eg.mul(x, eg.constant(alpha)), eg.constant(beta))


class RefineBlock(Block):
    """Depthwise conv, per-position layer norm, inverted bottleneck, skip."""

    def __init__(self, cin, rng, expand=4, cout=2, dtype=np.float32):
        super().__init__()
        self.dw = self._add("dw", _he(rng, (cin, 3, 3), 9, dtype))
        self.dwb = self._add("dwb", np.zeros(cin, dtype=dtype))
        self.ln_g = self._add("ln_g", np.ones(cin, dtype=dtype))
        self.ln_b = self._add("ln_b", np.zeros(cin, dtype=dtype))
        self.pw1 = self._child("pw1", Conv(cin, cin * expand, 1, 1, 0, rng, dtype))
        self.pw2 = self._child("pw2", Conv(cin * expand, cout, 1, 1, 0, rng, dtype))
        self.cout = cout

    def __call__(self, x):
        y = eg.depthwise_conv2d(x, self.dw, pad=1)
        y = eg.add(y, eg.reshape(self.dwb, (1, -1, 1, 1)))
        y = eg.layer_norm(y, self.ln_g, self.ln_b, axis=1)
        y = eg.relu(self.pw1(y))
        y = self.pw2(y)
        skip = eg.slice_axis(x, 1, 0, self.cout)
        return eg.add(y, skip)
