"""Class-specific residual attention for the multi-label head.

Per class, a softmax over spatial locations of temperature-scaled classifier
scores pools the feature map; the pooled vector is blended with the global
average feature and scored by the same classifier weights. Multiple heads
differ only in temperature and their logits add.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .blocks import Block, _he


@dataclass(frozen=True)
class CsraConfig:
    classes: int = 7
    temperatures: tuple = (1.0, 4.0)
    lam: float = 0.2

    def __post_init__(self):
        if any(t <= 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")


def attention_scores(m, w, temperature):
    """Per-class location softmax of temperature-scaled scores.

    m: (N, K, H, W) feature map; w: (classes, K) classifier rows.
    Returns (N, classes, H*W) rows summing to 1.
    """
    n, k, h, wd = m.shape
    flat = eg.reshape(m, (n, k, h * wd))
    scores = eg.matmul(eg.reshape(w, (1,) + w.shape), flat)  # (N, classes, H*W)
    return eg.softmax(eg.mul(scores, float(temperature)), axis=-1)


def class_features(u, m, lam):
    """Blend per-class attention pooling with the global average feature.

    u: (N, classes, H*W); m: (N, K, H, W). Returns (N, classes, K).
    """
    n, k, h, wd = m.shape
    flat = eg.reshape(m, (n, k, h * wd))
    pooled = eg.matmul(u, eg.swap_last2(flat))  # (N, classes, K)
    g = eg.reshape(eg.tmean(flat, axis=2), (n, 1, k))
    return eg.add(g, eg.mul(pooled, float(lam)))


class ResidualAttentionClassifier(Block):
    """Shared per-class weight vectors scored through multiple temperatures."""

    def __init__(self, feature_channels, rng, config=None, dtype=np.float32):
        super().__init__()
        self.config = config or CsraConfig()
        self.w = self._add("w", _he(rng, (self.config.classes, feature_channels),
                                    feature_channels, dtype))

    def __call__(self, m):
        """m: (N, K, H, W) -> logits (N, classes); head logits are added."""
        total = None
        for t in self.config.temperatures:
            u = attention_scores(m, self.w, t)
            feats = class_features(u, m, self.config.lam)  # (N, classes, K)
            w3 = eg.reshape(self.w, (1,) + self.w.shape)
            logits = eg.tsum(eg.mul(feats, w3), axis=2)  # (N, classes)
            total = logits if total is None else eg.add(total, logits)
        return total
