"""Frequency-space channels <-> truncated, normalised angular-delay matrices.

The forward transform applies a conjugate-transposed DFT along subcarriers
(612 subcarriers onto ``tau_n`` delay bins) and a unitary DFT along the
antenna axis. The delay transform is an explicit matrix product: the
612 -> 400 mapping is not a power-of-two FFT and the explicit form keeps the
adjoint exact. With ``tau_n == n_c`` both transforms are square unitary and
the pipeline composes to the identity.
"""

from __future__ import annotations

import numpy as np


class AdcrmError(Exception):
    pass


class AdcrmTransform:
    """Precomputed DFT operators for one (n_c, n_t, tau_n, theta_n) geometry."""

    def __init__(self, n_c=612, n_t=32, tau_n=400, theta_n=32):
        if theta_n != n_t:
            raise AdcrmError("angular resolution must match the antenna count")
        if tau_n > n_c:
            raise AdcrmError("delay bins cannot exceed subcarrier count")
        self.n_c, self.n_t, self.tau_n, self.theta_n = n_c, n_t, tau_n, theta_n
        m = np.arange(n_c)[:, None]
        l = np.arange(tau_n)[None, :]
        self.f_d = np.exp(-2j * np.pi * m * l / n_c) / np.sqrt(n_c)  # (n_c, tau_n)
        k = np.arange(n_t)[:, None]
        n = np.arange(theta_n)[None, :]
        self.f_a = np.exp(-2j * np.pi * k * n / n_t) / np.sqrt(n_t)  # (n_t, theta_n)

    def to_adcrm(self, h_multi):
        """(n_c, n_t) frequency-space channel -> (tau_n, theta_n) delay-angle."""
        h_multi = np.asarray(h_multi)
        if h_multi.shape[-2:] != (self.n_c, self.n_t):
            raise AdcrmError(
                f"expected (..., {self.n_c}, {self.n_t}) input, got {h_multi.shape}")
        return self.f_d.conj().T @ h_multi @ self.f_a

    def from_adcrm_full(self, h_ad):
        """Inverse of ``to_adcrm`` on untruncated (tau_n, theta_n) matrices."""
        return self.f_d @ h_ad @ self.f_a.conj().T

    def from_truncated(self, h_prime):
        """Zero-pad the truncated delay rows back to tau_n, then invert."""
        h_prime = np.asarray(h_prime)
        tau_p = h_prime.shape[-2]
        # F_d[:, :tau_p] @ h_prime == F_d @ zero-pad(h_prime)
        return self.f_d[:, :tau_p] @ h_prime @ self.f_a.conj().T


def truncate(h_ad, tau_prime=32):
    """Keep the first ``tau_prime`` delay rows (the informative ones)."""
    h_ad = np.asarray(h_ad)
    if tau_prime > h_ad.shape[-2]:
        raise AdcrmError("tau_prime exceeds available delay rows")
    return h_ad[..., :tau_prime, :]


def normalize(h_prime, stats):
    """Min-max map of both real planes to [0, 1] using dataset-global stats.

    ``h_prime`` is complex (..., tau', theta); returns real planes
    (..., 2, tau', theta) as float32.
    """
    lo, hi = float(stats[0]), float(stats[1])
    if not hi > lo:
        raise AdcrmError("degenerate normalisation stats (max <= min)")
    planes = np.stack([h_prime.real, h_prime.imag], axis=-3)
    return ((planes - lo) / (hi - lo)).astype(np.float32)


def denormalize(planes, stats):
    """Inverse of ``normalize``; returns complex (..., tau', theta)."""
    lo, hi = float(stats[0]), float(stats[1])
    if not hi > lo:
        raise AdcrmError("degenerate normalisation stats (max <= min)")
    phys = planes.astype(np.float64) * (hi - lo) + lo
    re = np.take(phys, 0, axis=-3)
    im = np.take(phys, 1, axis=-3)
    return re + 1j * im


def denormalize_planes(planes, stats):
    """Like ``denormalize`` but keeps the real-plane layout."""
    lo, hi = float(stats[0]), float(stats[1])
    if not hi > lo:
        raise AdcrmError("degenerate normalisation stats (max <= min)")
    return planes.astype(np.float64) * (hi - lo) + lo


def global_stats(h_primes):
    """Dataset-global (min, max) over the real views of complex samples."""
    planes = np.stack([h_primes.real, h_primes.imag])
    return float(planes.min()), float(planes.max())
