"""
Synthetic specific-emitter datasets.

Each emitter is a fixed set of analog-front-end impairments (IQ gain/phase
imbalance, DC offset, phase-noise walk, cubic PA compression) applied to an
RRC-shaped QPSK payload. The impairments are the fingerprint the network has
to learn; the payload is random per sample.

Also handles the labeled/unlabeled/validation/test split, min-max
normalization, the MATDS1 binary format and ingestion of external captures.
"""

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal as sp
from tqdm import tqdm

import config

logger = logging.getLogger(__name__)

PARTITIONS = ('labeled', 'unlabeled', 'validation', 'test')
UNLABELED = -1

# stream codes mixed into payload seeds
_TRAIN_STREAM = 0
_TEST_STREAM = 1


class DatasetFileError(ValueError):
    """Base class for dataset file problems."""


class DatasetFormatError(DatasetFileError):
    pass


class DatasetVersionError(DatasetFileError):
    pass


class DatasetTruncatedError(DatasetFileError):
    pass


class DatasetChecksumError(DatasetFileError):
    pass


class StratificationError(ValueError):
    """A class would end up with no labeled sample."""


@dataclass(frozen=True)
class EmitterProfile:
    emitter_id: int
    iq_gain_imbalance: float
    iq_phase_skew: float
    dc_offset_i: float
    dc_offset_q: float
    phase_noise_std: float
    pa_coeff3: float
    rng_seed: int

    def impairment_vector(self):
        return np.array([self.iq_gain_imbalance, self.iq_phase_skew, self.dc_offset_i,
                         self.dc_offset_q, self.phase_noise_std, self.pa_coeff3])


@dataclass(frozen=True)
class IQSignal:
    samples: np.ndarray  # [n, 2] (I, Q)
    label: Optional[int]
    snr_db: float

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ValueError(f"IQ samples must have shape [n, 2], got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("IQ samples contain non-finite values")

    @property
    def length(self):
        return self.samples.shape[0]

    def as_complex(self):
        return self.samples[:, 0].astype(np.float64) + 1j * self.samples[:, 1].astype(np.float64)


@dataclass
class DatasetConfig:
    num_classes: int = config.DEFAULT_NUM_CLASSES
    sample_length: int = config.DEFAULT_SAMPLE_LENGTH
    per_class_count: int = config.DEFAULT_PER_CLASS_COUNT
    labeled_ratio: float = config.DEFAULT_LABELED_RATIO
    snr_db: float = config.DEFAULT_SNR_DB
    master_seed: int = 0
    test_per_class_count: int = config.DEFAULT_TEST_PER_CLASS_COUNT
    impairment_scale: float = config.DEFAULT_IMPAIRMENT_SCALE
    validation_fraction: float = config.VALIDATION_FRACTION
    multipath: bool = False

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.sample_length < 16:
            raise ValueError(f"sample_length must be >= 16, got {self.sample_length}")
        if self.per_class_count < 4:
            raise ValueError(f"per_class_count must be >= 4, got {self.per_class_count}")
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ValueError(f"labeled_ratio must be in (0, 1], got {self.labeled_ratio}")
        if self.test_per_class_count < 1:
            raise ValueError(f"test_per_class_count must be >= 1, got {self.test_per_class_count}")
        if self.impairment_scale < 0:
            raise ValueError(f"impairment_scale must be >= 0, got {self.impairment_scale}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        _check_snr(self.snr_db)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass(frozen=True, eq=False)
class Partition:
    samples: np.ndarray  # [M, n, 2] float32
    labels: np.ndarray   # [M] int64, -1 when unlabeled

    def __len__(self):
        return self.samples.shape[0]

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((0, n, 2), dtype=np.float32), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class Dataset:
    labeled: Partition
    unlabeled: Partition
    validation: Partition
    test: Partition
    num_classes: int
    sample_length: int
    diagnostic_labels: Optional[np.ndarray] = None
    norm_min: Optional[float] = None
    norm_max: Optional[float] = None
    config: Optional[DatasetConfig] = None

    def partition(self, name):
        if name not in PARTITIONS:
            raise KeyError(f"unknown partition '{name}', expected one of {PARTITIONS}")
        return getattr(self, name)

    @property
    def is_normalized(self):
        return self.norm_min is not None

    def summary(self):
        labeled_total = len(self.labeled) + len(self.validation)
        train_total = labeled_total + len(self.unlabeled)
        return {
            'num_classes': self.num_classes,
            'sample_length': self.sample_length,
            'labeled': len(self.labeled),
            'unlabeled': len(self.unlabeled),
            'validation': len(self.validation),
            'test': len(self.test),
            'labeled_ratio': labeled_total / train_total if train_total else 0.0,
            'snr_db': self.config.snr_db if self.config else None,
            'normalized': self.is_normalized,
        }


# ---------------------------------------------------------------------------
# emitters and waveforms
# ---------------------------------------------------------------------------

def make_profile(emitter_id, master_seed, impairment_scale):
    """Deterministic impairment set for one emitter.

    Magnitudes scale linearly with ``impairment_scale``; 0 yields the ideal
    front end.
    """
    if impairment_scale < 0:
        raise ValueError(f"impairment_scale must be >= 0, got {impairment_scale}")
    rng = np.random.default_rng([master_seed, emitter_id])
    u = rng.uniform(-1.0, 1.0, size=6)
    s = float(impairment_scale)
    r = config.IMPAIRMENT_RANGES
    rng_seed = int(np.random.SeedSequence([master_seed, emitter_id, 0xE17]).generate_state(1, np.uint64)[0])
    return EmitterProfile(
        emitter_id=int(emitter_id),
        iq_gain_imbalance=max(1.0 + s * r['iq_gain_imbalance'] * u[0], config.MIN_IQ_GAIN),
        iq_phase_skew=s * r['iq_phase_skew'] * u[1],
        dc_offset_i=s * r['dc_offset'] * u[2],
        dc_offset_q=s * r['dc_offset'] * u[3],
        phase_noise_std=s * r['phase_noise_std'] * abs(u[4]),
        pa_coeff3=-s * r['pa_coeff3'] * abs(u[5]),
        rng_seed=rng_seed,
    )


def ideal_profile(emitter_id=0):
    return EmitterProfile(emitter_id, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0)


def rrc_taps(samples_per_symbol=config.SAMPLES_PER_SYMBOL, rolloff=config.RRC_ROLLOFF,
             span=config.RRC_SPAN_SYMBOLS):
    """Root-raised-cosine impulse response with unit energy."""
    t = np.arange(-span * samples_per_symbol // 2, span * samples_per_symbol // 2 + 1) / samples_per_symbol
    beta = rolloff
    taps = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            taps[i] = 1.0 - beta + 4.0 * beta / np.pi
        elif beta > 0 and abs(abs(ti) - 1.0 / (4.0 * beta)) < 1e-12:
            taps[i] = beta / np.sqrt(2.0) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
                                             + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta)))
        else:
            num = np.sin(np.pi * ti * (1 - beta)) + 4 * beta * ti * np.cos(np.pi * ti * (1 + beta))
            den = np.pi * ti * (1 - (4 * beta * ti) ** 2)
            taps[i] = num / den
    return taps / np.sqrt(np.sum(taps ** 2))


def sample_rng(profile, payload_seed):
    return np.random.default_rng([int(payload_seed), profile.rng_seed])


def shaped_qpsk(rng, n, samples_per_symbol=config.SAMPLES_PER_SYMBOL):
    """Unit-power RRC-shaped QPSK waveform of length n (first draws of ``rng``)."""
    taps = rrc_taps(samples_per_symbol)
    n_symbols = math.ceil(n / samples_per_symbol) + config.RRC_SPAN_SYMBOLS
    bits = rng.integers(0, 2, size=(n_symbols, 2))
    symbols = ((2 * bits[:, 0] - 1) + 1j * (2 * bits[:, 1] - 1)) / np.sqrt(2.0)
    shaped = sp.upfirdn(taps, symbols, up=samples_per_symbol)
    delay = (len(taps) - 1) // 2
    waveform = shaped[delay:delay + n]
    return waveform / np.sqrt(np.mean(np.abs(waveform) ** 2))


def apply_impairments(profile, x, rng):
    """Front-end distortion chain: IQ imbalance, DC, phase-noise walk, cubic PA."""
    i, q = x.real, x.imag
    g, phi = profile.iq_gain_imbalance, profile.iq_phase_skew
    y = i + 1j * g * (q * np.cos(phi) - i * np.sin(phi))
    y = y + (profile.dc_offset_i + 1j * profile.dc_offset_q)
    walk = np.cumsum(rng.normal(0.0, 1.0, size=x.shape[0]) * profile.phase_noise_std)
    y = y * np.exp(1j * walk)
    return y + profile.pa_coeff3 * y * np.abs(y) ** 2


def multipath_channel(x):
    taps = np.array([re + 1j * im for re, im in config.MULTIPATH_TAPS])
    return np.convolve(x, taps)[:x.shape[0]]


def add_awgn(x, snr_db, rng):
    if snr_db == np.inf:
        return x
    power = np.mean(np.abs(x) ** 2)
    std = np.sqrt(power / (10.0 ** (snr_db / 10.0)) / 2.0)
    noise = rng.normal(0.0, std, size=(x.shape[0], 2))
    return x + noise[:, 0] + 1j * noise[:, 1]


def _check_snr(snr_db):
    if np.isnan(snr_db) or snr_db == -np.inf:
        raise ValueError(f"snr_db must be finite or +inf (noise disabled), got {snr_db}")


def synthesize_sample(profile, payload_seed, snr_db, n, multipath=False):
    """One received record: QPSK -> RRC -> impairments -> channel -> AWGN."""
    if n < 16:
        raise ValueError(f"sample length must be >= 16, got {n}")
    _check_snr(snr_db)
    rng = sample_rng(profile, payload_seed)
    x = shaped_qpsk(rng, n)
    y = apply_impairments(profile, x, rng)
    if multipath:
        y = multipath_channel(y)
    y = add_awgn(y, snr_db, rng)
    return IQSignal(np.stack([y.real, y.imag], axis=1), profile.emitter_id, float(snr_db))


def payload_seed(master_seed, stream, emitter_id, index):
    return int(np.random.SeedSequence([master_seed, stream, emitter_id, index]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def _generate_class(profile, cfg, stream, count):
    out = np.empty((count, cfg.sample_length, 2), dtype=np.float32)
    for index in range(count):
        seed = payload_seed(cfg.master_seed, stream, profile.emitter_id, index)
        sig = synthesize_sample(profile, seed, cfg.snr_db, cfg.sample_length, cfg.multipath)
        out[index] = sig.samples
    return out


def stratified_quotas(class_sizes, ratio, rng):
    """Per-class labeled counts summing to round(ratio * N), largest remainder first."""
    sizes = np.asarray(class_sizes, dtype=np.int64)
    total = int(np.floor(ratio * sizes.sum() + 0.5))
    exact = ratio * sizes
    quotas = np.minimum(np.floor(exact).astype(np.int64), sizes)
    remainder = exact - quotas
    # random tie-break among equal remainders
    order = sorted(rng.permutation(len(sizes)), key=lambda c: -remainder[c])
    for c in order:
        if quotas.sum() >= total:
            break
        if quotas[c] < sizes[c]:
            quotas[c] += 1
    return quotas


def split_training(samples_by_class, labeled_ratio, validation_fraction, rng):
    """Stratified labeled / unlabeled / validation split of per-class training arrays.

    Returns (labeled, unlabeled, validation, diagnostic_labels).
    """
    quotas = stratified_quotas([len(s) for s in samples_by_class], labeled_ratio, rng)
    empty = [c for c, q in enumerate(quotas) if q == 0]
    if empty:
        raise StratificationError(
            f"labeled_ratio {labeled_ratio} leaves classes {empty} without labeled samples")

    lab_x, lab_y, val_x, val_y, unl_x, unl_y = [], [], [], [], [], []
    for label, (block, quota) in enumerate(zip(samples_by_class, quotas)):
        order = rng.permutation(len(block))
        picked, rest = order[:quota], np.sort(order[quota:])
        # at least one labeled training sample stays in every class
        n_val = min(int(np.floor(validation_fraction * quota + 0.5)), int(quota) - 1)
        val_idx, lab_idx = np.sort(picked[:n_val]), np.sort(picked[n_val:])
        lab_x.append(block[lab_idx])
        lab_y.append(np.full(len(lab_idx), label))
        val_x.append(block[val_idx])
        val_y.append(np.full(len(val_idx), label))
        unl_x.append(block[rest])
        unl_y.append(np.full(len(rest), label))

    def pack(xs, ys, hide=False):
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys).astype(np.int64)
        return Partition(x, np.full_like(y, UNLABELED) if hide else y), y

    labeled, _ = pack(lab_x, lab_y)
    validation, _ = pack(val_x, val_y)
    unlabeled, diagnostic = pack(unl_x, unl_y, hide=True)
    return labeled, unlabeled, validation, diagnostic


def build_dataset(cfg, progress=False):
    """Generate, split and return an un-normalized Dataset for ``cfg``."""
    cfg.validate()
    train_blocks, test_blocks = [], []
    for emitter_id in tqdm(range(cfg.num_classes), desc='emitters', disable=not progress):
        profile = make_profile(emitter_id, cfg.master_seed, cfg.impairment_scale)
        train_blocks.append(_generate_class(profile, cfg, _TRAIN_STREAM, cfg.per_class_count))
        test_blocks.append(_generate_class(profile, cfg, _TEST_STREAM, cfg.test_per_class_count))

    split_rng = np.random.default_rng([cfg.master_seed, 0x5917])
    labeled, unlabeled, validation, diagnostic = split_training(
        train_blocks, cfg.labeled_ratio, cfg.validation_fraction, split_rng)
    test = Partition(np.concatenate(test_blocks),
                     np.repeat(np.arange(cfg.num_classes), cfg.test_per_class_count).astype(np.int64))
    dataset = Dataset(labeled, unlabeled, validation, test, cfg.num_classes, cfg.sample_length,
                      diagnostic_labels=diagnostic, config=cfg)
    logger.info(f"📡 dataset built: {dataset.summary()}")
    return dataset


def normalize_min_max(dataset):
    """Map every partition through (x - min) / (max - min) of the training union."""
    training = [p.samples for p in (dataset.labeled, dataset.unlabeled) if len(p)]
    if not training:
        raise ValueError("cannot normalize a dataset without training samples")
    lo = float(min(np.min(x.astype(np.float64)) for x in training))
    hi = float(max(np.max(x.astype(np.float64)) for x in training))
    if hi == lo:
        raise ValueError(f"constant dataset (min = max = {lo}); cannot normalize")
    span = hi - lo

    def scale(p):
        mapped = ((p.samples.astype(np.float64) - lo) / span).astype(np.float32)
        return Partition(mapped, p.labels)

    return replace(dataset, labeled=scale(dataset.labeled), unlabeled=scale(dataset.unlabeled),
                   validation=scale(dataset.validation), test=scale(dataset.test),
                   norm_min=lo, norm_max=hi)


def iter_signals(partition, snr_db=float('nan')):
    for samples, label in zip(partition.samples, partition.labels):
        yield IQSignal(samples, None if label == UNLABELED else int(label), snr_db)


# ---------------------------------------------------------------------------
# MATDS1 files
# ---------------------------------------------------------------------------

_DS_HEADER = struct.Struct('<6sHHI4Idd')


def sidecar_path(path):
    return Path(path).with_suffix('.meta.json')


def save_dataset(dataset, path):
    path = Path(path)
    counts = [len(dataset.partition(name)) for name in PARTITIONS]
    norm_min = np.nan if dataset.norm_min is None else dataset.norm_min
    norm_max = np.nan if dataset.norm_max is None else dataset.norm_max
    chunks = [_DS_HEADER.pack(config.DATASET_MAGIC, config.DATASET_VERSION, dataset.num_classes,
                              dataset.sample_length, *counts, norm_min, norm_max)]
    for name in PARTITIONS:
        part = dataset.partition(name)
        chunks.append(np.ascontiguousarray(part.samples, dtype='<f4').tobytes())
        chunks.append(np.ascontiguousarray(part.labels, dtype='<i4').tobytes())
    body = b''.join(chunks)
    with open(path, 'wb') as fh:
        fh.write(body)
        fh.write(struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF))

    meta = {
        'config': dataset.config.to_dict() if dataset.config else None,
        'diagnostic_labels': (dataset.diagnostic_labels.tolist()
                              if dataset.diagnostic_labels is not None else None),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info(f"💾 dataset saved: {path}")


def load_dataset(path):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 or blob[:6] != config.DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a MATDS1 file")
    if len(blob) < 8:
        raise DatasetTruncatedError(f"{path}: header cut short")
    (version,) = struct.unpack_from('<H', blob, 6)
    if version != config.DATASET_VERSION:
        raise DatasetVersionError(f"{path}: dataset version {version}, expected {config.DATASET_VERSION}")
    if len(blob) < _DS_HEADER.size + 4:
        raise DatasetTruncatedError(f"{path}: header cut short")
    _, _, num_classes, n, *rest = _DS_HEADER.unpack_from(blob, 0)
    counts, (norm_min, norm_max) = rest[:4], rest[4:]
    expected = _DS_HEADER.size + sum(c * (n * 2 * 4 + 4) for c in counts)
    body = blob[:-4]
    if len(body) < expected:
        raise DatasetTruncatedError(f"{path}: header announces {expected} bytes, payload has {len(body)}")
    if len(body) > expected:
        raise DatasetFormatError(f"{path}: {len(body) - expected} unexpected trailing bytes")
    (stored_crc,) = struct.unpack('<I', blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise DatasetChecksumError(f"{path}: CRC32 mismatch")

    offset = _DS_HEADER.size
    parts = {}
    for name, count in zip(PARTITIONS, counts):
        if count == 0:
            parts[name] = Partition.empty(n)
            continue
        size = count * n * 2
        samples = np.frombuffer(body, dtype='<f4', count=size, offset=offset).astype(np.float32)
        offset += size * 4
        labels = np.frombuffer(body, dtype='<i4', count=count, offset=offset).astype(np.int64)
        offset += count * 4
        parts[name] = Partition(samples.reshape(count, n, 2), labels)

    cfg, diagnostic = None, None
    meta_file = sidecar_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        if meta.get('config') is not None:
            cfg = DatasetConfig.from_dict(meta['config'])
        if meta.get('diagnostic_labels') is not None:
            diagnostic = np.asarray(meta['diagnostic_labels'], dtype=np.int64)
    else:
        logger.warning(f"⚠️ sidecar {meta_file} missing; config and diagnostic labels unavailable")

    return Dataset(parts['labeled'], parts['unlabeled'], parts['validation'], parts['test'],
                   num_classes, n, diagnostic_labels=diagnostic,
                   norm_min=None if np.isnan(norm_min) else norm_min,
                   norm_max=None if np.isnan(norm_max) else norm_max,
                   config=cfg)


# ---------------------------------------------------------------------------
# raw-iq ingestion
# ---------------------------------------------------------------------------

def load_raw_iq(directory, labeled_ratio, seed=0, test_fraction=0.2,
                validation_fraction=config.VALIDATION_FRACTION):
    """Build a Dataset from a directory of per-class captures.

    The directory holds ``manifest.json``::

        {"num_classes": K, "sample_length": n,
         "files": {"0": "emitter0.f32", "1": "emitter1.f32", ...}}

    and one little-endian f32 file per class with interleaved I/Q, n complex
    samples per record.
    """
    directory = Path(directory)
    manifest_file = directory / 'manifest.json'
    if not manifest_file.exists():
        raise FileNotFoundError(f"raw-iq manifest not found: {manifest_file}")
    try:
        manifest = json.loads(manifest_file.read_text())
        num_classes = int(manifest['num_classes'])
        n = int(manifest['sample_length'])
        files = {int(k): v for k, v in manifest['files'].items()}
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetFormatError(f"{manifest_file}: malformed manifest ({e})") from e
    if sorted(files) != list(range(num_classes)):
        raise DatasetFormatError(f"{manifest_file}: files must cover classes 0..{num_classes - 1}")

    rng = np.random.default_rng([seed, 0x4A11])
    train_blocks, test_x, test_y = [], [], []
    for label in range(num_classes):
        raw = np.fromfile(directory / files[label], dtype='<f4')
        record = n * 2
        if raw.size == 0 or raw.size % record:
            raise DatasetTruncatedError(f"{files[label]}: {raw.size} values is not a multiple of {record}")
        block = raw.reshape(-1, n, 2).astype(np.float32)
        order = rng.permutation(len(block))
        n_test = int(np.floor(test_fraction * len(block) + 0.5))
        test_x.append(block[np.sort(order[:n_test])])
        test_y.append(np.full(n_test, label))
        train_blocks.append(block[np.sort(order[n_test:])])
        logger.debug(f"raw-iq class {label}: {len(block)} records")

    labeled, unlabeled, validation, diagnostic = split_training(
        train_blocks, labeled_ratio, validation_fraction, rng)
    test = Partition(np.concatenate(test_x), np.concatenate(test_y).astype(np.int64))
    return Dataset(labeled, unlabeled, validation, test, num_classes, n, diagnostic_labels=diagnostic)
