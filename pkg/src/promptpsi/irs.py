"""IRS-aided single-user link: channels, optimal phase shifts, quantization, datasets.

The cascaded channel over an ``H x W`` surface is a sum of planar-wavefront
paths. Each path contributes ``gain * exp(j*2*pi*d*(i*sin(a) + k*sin(b)))`` at
element ``(i, k)``. NLoS draws ``L`` scattered paths with ``CN(0, 1/L)`` gains
and angles uniform in ``[-spread, spread]``; LoS adds a fixed-direction
deterministic path weighted by the Rician K-factor. The phase-shift matrix that
coherently aligns every reflected path with the direct link is available in
closed form, which gives an exact ground truth for the compressor.
"""
import hashlib
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .seeding import rng as make_rng

TWO_PI = 2.0 * math.pi
LOS, NLOS = "LoS", "NLoS"
CHANNEL_TYPES = (LOS, NLOS)
_CHANNEL_CODE = {LOS: 0, NLOS: 1}

DATASET_MAGIC = b"PSID1"
# H, W, count, channel code, K dB, paths, bits-or-0, seed, config digest (32 bytes)
_DATASET_HEADER = struct.Struct("<5sIIIBdIIQ32s")


def parse_channel_type(name):
    for t in CHANNEL_TYPES:
        if name.strip().lower() == t.lower():
            return t
    raise ValueError(f"unknown channel type {name!r}; expected one of {CHANNEL_TYPES}")


@dataclass(frozen=True)
class SystemConfig:
    rows: int = 16
    cols: int = 16
    paths: int = 3
    rician_k_db: float = 10.0
    quant_bits: int = 3
    spacing: float = 0.5
    angle_spread_deg: float = 20.0
    los_az_deg: float = 12.0
    los_el_deg: float = -6.0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"IRS must be at least 2x2, got {self.rows}x{self.cols}")
        if self.paths < 1:
            raise ValueError(f"need at least one path, got {self.paths}")
        if not 1 <= self.quant_bits <= 8:
            raise ValueError(f"quant_bits must be in [1, 8], got {self.quant_bits}")
        if self.spacing <= 0:
            raise ValueError("element spacing must be positive")

    @property
    def n_elements(self):
        return self.rows * self.cols

    def digest(self):
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()


@dataclass
class ChannelRealization:
    h_direct: complex
    cascade: np.ndarray
    channel_type: str


@dataclass
class QuantizedPsi:
    indices: np.ndarray
    bits: int


def steering(cfg, az, el):
    """Unit-modulus planar phase ramp over the surface for angles in radians."""
    i = np.arange(cfg.rows)[:, None]
    k = np.arange(cfg.cols)[None, :]
    return np.exp(1j * TWO_PI * cfg.spacing * (i * np.sin(az) + k * np.sin(el)))


def _crandn(rng, size=None):
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / math.sqrt(2.0)


def generate_channel(cfg, channel_type, rng):
    """One channel realization. ``rng`` is a ``numpy.random.Generator``."""
    channel_type = parse_channel_type(channel_type)
    h_direct = complex(_crandn(rng))
    spread = math.radians(cfg.angle_spread_deg)
    gains = _crandn(rng, cfg.paths) / math.sqrt(cfg.paths)
    az = rng.uniform(-spread, spread, cfg.paths)
    el = rng.uniform(-spread, spread, cfg.paths)
    scatter = np.zeros((cfg.rows, cfg.cols), dtype=np.complex128)
    for g, a, e in zip(gains, az, el):
        scatter += g * steering(cfg, a, e)
    if channel_type == NLOS:
        cascade = scatter
    else:
        los = steering(cfg, math.radians(cfg.los_az_deg), math.radians(cfg.los_el_deg))
        if math.isinf(cfg.rician_k_db) and cfg.rician_k_db > 0:
            cascade = los
        else:
            k = 10.0 ** (cfg.rician_k_db / 10.0)
            cascade = math.sqrt(k / (k + 1.0)) * los + math.sqrt(1.0 / (k + 1.0)) * scatter
    return ChannelRealization(h_direct, cascade, channel_type)


def wrap_phase(theta):
    """Map angles into ``[0, 2*pi)``."""
    out = np.mod(theta, TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


def optimal_psi(ch):
    """Coherent-combining phases ``arg(h_d) - arg(cascade)`` wrapped to [0, 2pi)."""
    phases = wrap_phase(np.angle(ch.h_direct) - np.angle(ch.cascade))
    return np.where(ch.cascade == 0, 0.0, phases)


def received_power(ch, psi):
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != ch.cascade.shape:
        raise ValueError(f"received_power: psi shape {psi.shape} != cascade {ch.cascade.shape}")
    return float(abs(ch.h_direct + np.sum(ch.cascade * np.exp(1j * psi))) ** 2)


def quantize(psi, bits):
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    levels = 1 << bits
    idx = np.floor(np.asarray(psi, dtype=np.float64) / (TWO_PI / levels)).astype(np.int64)
    return QuantizedPsi(np.clip(idx, 0, levels - 1), bits)


def dequantize(q):
    return (q.indices + 0.5) * (TWO_PI / (1 << q.bits))


def spatial_tv(psi):
    """Mean absolute wrapped phase difference between 4-neighbors (radians)."""
    psi = np.asarray(psi, dtype=np.float64)
    dh = np.diff(psi, axis=-1)
    dv = np.diff(psi, axis=-2)
    wrap = lambda d: np.abs(np.mod(d + math.pi, TWO_PI) - math.pi)  # noqa: E731
    n = dh.shape[-2] * dh.shape[-1] + dv.shape[-2] * dv.shape[-1]
    return (wrap(dh).sum(axis=(-2, -1)) + wrap(dv).sum(axis=(-2, -1))) / n


# ---------------------------------------------------------------------------
# datasets


def _sample_block(args):
    cfg, channel_type, seed, start, stop, bits = args
    out = np.empty((stop - start, cfg.rows, cfg.cols))
    for n, idx in enumerate(range(start, stop)):
        ch = generate_channel(cfg, channel_type, make_rng(seed, "sample", idx))
        psi = optimal_psi(ch)
        if bits:
            psi = dequantize(quantize(psi, bits))
        out[n] = psi / TWO_PI
    return out


def generate_dataset(cfg, channel_type, n, seed, quantize_bits=0, workers=1):
    """``n`` normalized optimal PSI matrices, shape ``(n, H, W)``, values in [0, 1).

    Sample ``i`` uses its own RNG substream keyed by ``(seed, i)`` so the result
    does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    channel_type = parse_channel_type(channel_type)
    if workers <= 1:
        return _sample_block((cfg, channel_type, seed, 0, n, quantize_bits))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    jobs = [(cfg, channel_type, seed, int(a), int(b), quantize_bits)
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(_sample_block, jobs)))


@dataclass
class Dataset:
    psi: np.ndarray
    channel_type: str
    rician_k_db: float
    paths: int
    bits: int
    seed: int
    config_digest: str

    @property
    def count(self):
        return self.psi.shape[0]


def write_dataset(path, ds):
    n, h, w = ds.psi.shape
    header = _DATASET_HEADER.pack(DATASET_MAGIC, h, w, n, _CHANNEL_CODE[ds.channel_type],
                                  float(ds.rician_k_db), ds.paths, ds.bits, ds.seed,
                                  bytes.fromhex(ds.config_digest))
    body = np.ascontiguousarray(ds.psi, dtype="<f8").tobytes()
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(body)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write dataset {path}: {exc}") from exc


def read_dataset(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read dataset {path}: {exc}") from exc
    if len(raw) < _DATASET_HEADER.size or raw[:5] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a PSID1 dataset file")
    magic, h, w, n, code, k_db, paths, bits, seed, digest = _DATASET_HEADER.unpack_from(raw)
    expected = _DATASET_HEADER.size + 8 * n * h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated dataset ({len(raw)} bytes, expected {expected})")
    psi = np.frombuffer(raw, dtype="<f8", offset=_DATASET_HEADER.size).reshape(n, h, w).copy()
    return Dataset(psi, CHANNEL_TYPES[code], k_db, paths, bits, seed, digest.hex())


def split_indices(count, seed, fractions=(0.8, 0.1, 0.1)):
    """Deterministic disjoint train/val/test index arrays."""
    perm = make_rng(seed, "split").permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))
