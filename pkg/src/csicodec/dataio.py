"""Dataset assembly and the CSID binary container.

CSID v1 layout (little-endian):
    magic "CSID" | u32 version=1 | u32 sample_count | u16 tau_prime |
    u16 theta | u8 label_dim=7 | f32 norm_min | f32 norm_max  (25-byte header)
followed per sample by tau_prime*theta*2 f32 values (real plane then
imaginary plane, row-major) and 7 label bytes (0/1, or all 0xFF when the
sample is unlabeled).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import adcrm, cdl

MAGIC = b"CSID"
VERSION = 1
LABEL_DIM = 7
_HEADER = struct.Struct("<4sIIHHBff")


class FormatError(Exception):
    pass


class TruncationError(FormatError):
    pass


@dataclass
class Dataset:
    """In-memory dataset: normalised real-plane tensors plus labels."""

    planes: np.ndarray            # (n, 2, tau_prime, theta) float32 in [0, 1]
    labels: np.ndarray | None     # (n, 7) uint8, or None when unlabeled
    norm_stats: tuple             # (min, max) used for normalisation

    def __len__(self):
        return self.planes.shape[0]

    @property
    def labeled(self):
        return self.labels is not None

    def subset(self, idx):
        labels = self.labels[idx] if self.labeled else None
        return Dataset(self.planes[idx], labels, self.norm_stats)


def write_csid(path, dataset):
    n, _, tau_p, theta = dataset.planes.shape
    lo, hi = dataset.norm_stats
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, tau_p, theta, LABEL_DIM,
                              np.float32(lo), np.float32(hi)))
        unlabeled = np.full(LABEL_DIM, 0xFF, dtype=np.uint8)
        for i in range(n):
            fh.write(dataset.planes[i].astype("<f4").tobytes())
            row = dataset.labels[i] if dataset.labeled else unlabeled
            fh.write(row.astype(np.uint8).tobytes())


def read_csid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than CSID header")
    magic, version, count, tau_p, theta, label_dim, lo, hi = \
        _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CSID version {version}")
    if label_dim != LABEL_DIM:
        raise FormatError(f"unexpected label dimension {label_dim}")
    sample_bytes = tau_p * theta * 2 * 4 + label_dim
    expected = _HEADER.size + count * sample_bytes
    if len(raw) != expected:
        raise TruncationError(
            f"size mismatch: have {len(raw)} bytes, header implies {expected}")
    planes = np.empty((count, 2, tau_p, theta), dtype=np.float32)
    labels = np.empty((count, label_dim), dtype=np.uint8)
    off = _HEADER.size
    for i in range(count):
        planes[i] = np.frombuffer(raw, dtype="<f4", count=tau_p * theta * 2,
                                  offset=off).reshape(2, tau_p, theta)
        off += tau_p * theta * 2 * 4
        labels[i] = np.frombuffer(raw, dtype=np.uint8, count=label_dim, offset=off)
        off += label_dim
    if (labels == 0xFF).all():
        return Dataset(planes, None, (lo, hi))
    return Dataset(planes, labels, (lo, hi))


def ingest_external(path):
    """Load an externally generated CSID file as a target-domain dataset."""
    return read_csid(path)


# ---------------------------------------------------------------------------
# Generation


@dataclass
class GenConfig:
    per_class_count: int = 10
    seed: int = 0
    split_fraction: float = 0.3
    tau_prime: int = 32
    link: cdl.LinkConfig = None
    grid: cdl.DiversityGrid = None
    tau_n: int = 400
    snapshot_max_s: float = 1.0
    profiles: tuple = tuple(cdl.PROFILE_IDS)

    def __post_init__(self):
        if self.per_class_count <= 0:
            raise ValueError("per_class_count must be positive")
        self.profiles = tuple(self.profiles)
        for p in self.profiles:
            if p not in cdl.PROFILE_IDS:
                raise ValueError(f"unknown CDL profile {p!r}")
        if self.link is None:
            self.link = cdl.LinkConfig()
        if self.grid is None:
            self.grid = cdl.DiversityGrid()


def _sample_rng(dataset_seed, index):
    # per-sample stream: parallel and serial generation agree byte-for-byte
    return np.random.default_rng(np.random.SeedSequence((dataset_seed, index)))


def _f32_stats(stats):
    # headers store f32; round up front so in-memory and on-disk stats agree
    return float(np.float32(stats[0])), float(np.float32(stats[1]))


def _generate_truncated(config):
    """Synthesize per_class_count samples per profile, ADCRM-process them.

    Returns (h_primes complex (n, tau', theta), labels (n, 7)).
    """
    profiles = config.profiles
    link = config.link
    transform = adcrm.AdcrmTransform(link.n_subcarriers, link.n_antennas,
                                     config.tau_n, link.n_antennas)
    points = config.grid.points()
    per_class = config.per_class_count
    n = per_class * len(profiles)
    h_primes = np.empty((n, config.tau_prime, link.n_antennas), dtype=np.complex128)
    labels = np.empty((n, LABEL_DIM), dtype=np.uint8)
    idx = 0
    for profile_id in profiles:
        profile = cdl.load_profile(profile_id)
        label = cdl.label_for(profile_id)
        for j in range(per_class):
            rng = _sample_rng(config.seed, idx)
            point = points[j % len(points)]
            t = rng.uniform(0.0, config.snapshot_max_s)
            h_multi = cdl.synthesize_channel(profile, point, link, t, rng)
            h_ad = transform.to_adcrm(h_multi)
            h_primes[idx] = adcrm.truncate(h_ad, config.tau_prime)
            labels[idx] = label
            idx += 1
    return h_primes, labels


def build_dataset(config):
    """Category-balanced train/test datasets with shared global stats.

    The stratified 30% test split and the shuffle both derive from the
    dataset seed, so identical configs produce identical bytes.
    """
    h_primes, labels = _generate_truncated(config)
    stats = _f32_stats(adcrm.global_stats(h_primes))
    planes = adcrm.normalize(h_primes, stats)

    per_class = config.per_class_count
    n_classes = len(config.profiles)
    n_test_per = int(round(config.split_fraction * per_class))
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC1A55)))
    train_idx, test_idx = [], []
    for c in range(n_classes):
        order = rng.permutation(per_class) + c * per_class
        test_idx.extend(order[:n_test_per])
        train_idx.extend(order[n_test_per:])
    train_idx = np.array(train_idx)[rng.permutation(len(train_idx))]
    test_idx = np.array(test_idx)[rng.permutation(len(test_idx))]

    train = Dataset(planes[train_idx], labels[train_idx], stats)
    test = Dataset(planes[test_idx], labels[test_idx], stats)
    return train, test


@dataclass
class SurrogateConfig:
    """Out-of-grid CDL settings standing in for an external target domain.

    A long delay spread, wide azimuth spreads and a low-band carrier with
    the 3.5 GHz antenna pitch (spacing >> half the new wavelength is kept
    fixed in metres, so in wavelengths it shrinks by the carrier ratio)
    produce angular-delay statistics genuinely drifted from the source grid.
    """

    count: int = 2000
    seed: int = 1
    tau_prime: int = 32
    tau_n: int = 400
    ds_s: float = 700e-9
    asd_deg: float = 40.0
    asa_deg: float = 60.0
    zsd_deg: float = 10.0
    zsa_deg: float = 3.0
    carrier_hz: float = 300e6
    ue_speed_mps: float = 1.0
    snapshot_max_s: float = 1.0


def surrogate_target(config):
    """Unlabeled drifted-domain dataset with its own normalisation stats."""
    base = cdl.LinkConfig()
    link = cdl.LinkConfig(
        n_subcarriers=base.n_subcarriers,
        n_antennas=base.n_antennas,
        subcarrier_spacing_hz=base.subcarrier_spacing_hz,
        carrier_hz=config.carrier_hz,
        ue_speed_mps=config.ue_speed_mps,
        antenna_spacing_wl=base.antenna_spacing_wl * config.carrier_hz / base.carrier_hz,
    )
    transform = adcrm.AdcrmTransform(link.n_subcarriers, link.n_antennas,
                                     config.tau_n, link.n_antennas)
    point = cdl.DiversityPoint(config.ds_s, config.asd_deg, config.asa_deg,
                               config.zsa_deg, config.zsd_deg)
    profiles = [cdl.load_profile(p) for p in cdl.PROFILE_IDS]
    h_primes = np.empty((config.count, config.tau_prime, link.n_antennas),
                        dtype=np.complex128)
    for i in range(config.count):
        rng = _sample_rng(config.seed, i)
        profile = profiles[int(rng.integers(len(profiles)))]
        t = rng.uniform(0.0, config.snapshot_max_s)
        h_multi = cdl.synthesize_channel(profile, point, link, t, rng)
        h_primes[i] = adcrm.truncate(transform.to_adcrm(h_multi), config.tau_prime)
    stats = _f32_stats(adcrm.global_stats(h_primes))
    return Dataset(adcrm.normalize(h_primes, stats), None, stats)
