"""Datasets of labelled multivariate series with subject ids.

Covers the canonical on-disk format, per-trial standard scaling, windowing,
subject-dependent and subject-independent splitting, and a seeded synthetic
generator for desk-scale experiments.

Canonical file (little-endian)::

    header   magic b"MTSD" | version u32 | n_records u64 | T u32 | C u32 | K u32
             | sampling_rate_hz f32
    records  subject_id u32 | label u16 | series f32[T*C]   (time-major)

A sidecar ``<file>.manifest`` holds UTF-8 ``key=value`` lines (name,
provenance).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, FormatError, ShapeError

DATA_MAGIC = b"MTSD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIQIIIf")

# Trial-to-sample parameters of the public datasets, for users converting raw
# recordings with :func:`from_trials`. Acquisition and modality-specific
# preprocessing (filtering, resampling, beat extraction) happen upstream.
DATASET_PRESETS: dict[str, dict] = {
    "APAVA": dict(n_classes=2, channels=16, window_len=256, overlap=0.5, scale=True,
                  sampling_rate_hz=256.0, val_subjects=(15, 16, 19, 20),
                  test_subjects=(1, 2, 17, 18), batch_size=32,
                  patch_lengths=(2, 2, 2, 4, 4, 4, 16, 16, 16, 16, 32, 32, 32, 32, 32),
                  augmentations=("none", "mask0.35")),
    "TDBrain": dict(n_classes=2, channels=33, window_len=256, overlap=0.0, scale=True,
                    sampling_rate_hz=256.0, val_subjects=(18, 19, 20, 21, 46, 47, 48, 49),
                    test_subjects=(22, 23, 24, 25, 50, 51, 52, 53), batch_size=32,
                    patch_lengths=(8, 8, 8, 16, 16, 16), augmentations=("none", "mask0.25")),
    "ADFD": dict(n_classes=3, channels=19, window_len=256, overlap=0.0, scale=True,
                 sampling_rate_hz=256.0, ratios=(0.6, 0.2, 0.2), batch_size=128,
                 patch_lengths=(2, 4, 8, 8, 16, 16, 16, 16, 32, 32, 32, 32, 32, 32, 32, 32),
                 augmentations=("mask0.5",)),
    "PTB": dict(n_classes=2, channels=15, window_len=300, overlap=0.0, scale=True,
                sampling_rate_hz=250.0, ratios=(0.6, 0.2, 0.2), batch_size=128,
                patch_lengths=(2, 4, 8, 8, 16, 16, 16, 32, 32, 32, 32, 32),
                augmentations=("mask0.5",)),
    "PTB-XL": dict(n_classes=5, channels=12, window_len=250, overlap=0.0, scale=True,
                   sampling_rate_hz=250.0, ratios=(0.6, 0.2, 0.2), batch_size=128,
                   patch_lengths=(2, 4, 8, 8, 16, 16, 16, 16, 32, 32, 32, 32, 32, 32, 32, 32),
                   augmentations=("jitter0.2", "scale0.2", "mask0.5")),
}


@dataclass(frozen=True)
class SampleRecord:
    series: np.ndarray
    label: int
    subject_id: int


@dataclass
class Dataset:
    """Samples ``(n, T, C)`` with integer labels and subject ids."""

    series: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    n_classes: int
    sampling_rate_hz: float = 0.0
    name: str = "dataset"
    provenance: str = ""

    def __post_init__(self):
        self.series = np.ascontiguousarray(self.series, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.series.ndim != 3:
            raise ShapeError(f"series must be (n, T, C), got {self.series.shape}")
        n = self.series.shape[0]
        if n == 0:
            raise ShapeError("dataset must contain at least one record")
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ShapeError(f"labels {self.labels.shape} / subjects {self.subjects.shape} "
                             f"do not match {n} records")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be positive, got {self.n_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ConfigError(f"labels outside [0, {self.n_classes})")

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord], n_classes: int,
                     **meta) -> Dataset:
        """Stack records, rejecting any whose ``(T, C)`` differs from the first."""
        if not records:
            raise ShapeError("dataset must contain at least one record")
        shape = np.shape(records[0].series)
        for i, rec in enumerate(records):
            if np.shape(rec.series) != shape:
                raise ShapeError(f"record {i} has shape {np.shape(rec.series)}, "
                                 f"expected {shape} (T, C)")
        return cls(np.stack([np.asarray(r.series) for r in records]),
                   [r.label for r in records], [r.subject_id for r in records],
                   n_classes, **meta)

    def __len__(self) -> int:
        return self.series.shape[0]

    @property
    def seq_len(self) -> int:
        return self.series.shape[1]

    @property
    def n_channels(self) -> int:
        return self.series.shape[2]

    def subject_ids(self) -> list[int]:
        return sorted(set(self.subjects.tolist()))

    def subset(self, index, name: str | None = None) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.series[index], self.labels[index], self.subjects[index],
                       self.n_classes, self.sampling_rate_hz, name or self.name, self.provenance)

    def records(self) -> Iterable[SampleRecord]:
        for x, y, s in zip(self.series, self.labels, self.subjects):
            yield SampleRecord(x, int(y), int(s))


# -- splitting ----------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """How to divide a dataset into train / validation / test.

    ``mode`` is ``"subject_dependent"`` (samples shuffled and cut by ratio) or
    ``"subject_independent"`` (subjects are assigned, samples follow them).
    In independent mode explicit ``val_subjects``/``test_subjects`` override
    the ratios; train then defaults to the remaining subjects.
    """

    mode: str = "subject_independent"
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    train_subjects: tuple[int, ...] | None = None
    val_subjects: tuple[int, ...] | None = None
    test_subjects: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("subject_dependent", "subject_independent"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
        object.__setattr__(self, "ratios", ratios)
        lists = [self.train_subjects, self.val_subjects, self.test_subjects]
        given = [set(x) for x in lists if x is not None]
        for i in range(len(given)):
            for j in range(i + 1, len(given)):
                if given[i] & given[j]:
                    raise ConfigError(f"explicit subject lists overlap on {sorted(given[i] & given[j])}")
        if (self.val_subjects is None) != (self.test_subjects is None):
            raise ConfigError("val_subjects and test_subjects must be given together")
        if self.val_subjects is not None and self.mode != "subject_independent":
            raise ConfigError("explicit subject lists require subject_independent mode")

    @property
    def explicit(self) -> bool:
        return self.val_subjects is not None


def _cut(cum: np.ndarray, target: float, lo: int, hi: int) -> int:
    """Index in ``[lo, hi]`` whose cumulative fraction is closest to ``target``."""
    candidates = np.arange(lo, hi + 1)
    return int(candidates[np.argmin(np.abs(cum[candidates] - target))])


def _assign_subjects(dataset: Dataset, plan: SplitPlan) -> tuple[set, set, set]:
    known = set(dataset.subject_ids())
    if plan.explicit:
        val, test = set(plan.val_subjects), set(plan.test_subjects)
        train = set(plan.train_subjects) if plan.train_subjects is not None else known - val - test
        unknown = (train | val | test) - known
        if unknown:
            raise ConfigError(f"split references unknown subjects {sorted(unknown)}")
        return train, val, test

    subjects = np.array(sorted(known))
    if len(subjects) < 3:
        raise ConfigError(f"subject-independent ratio split needs >= 3 subjects, got {len(subjects)}")
    order = np.random.default_rng(plan.seed).permutation(subjects)
    counts = np.array([(dataset.subjects == s).sum() for s in order], dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(counts)]) / counts.sum()
    s = len(order)
    a = _cut(cum, plan.ratios[0], 1, s - 2)
    b = _cut(cum, plan.ratios[0] + plan.ratios[1], a + 1, s - 1)
    return set(order[:a].tolist()), set(order[a:b].tolist()), set(order[b:].tolist())


def split(dataset: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset, Dataset]:
    """Return ``(train, val, test)``; every sample lands in exactly one part."""
    n = len(dataset)
    if plan.mode == "subject_dependent":
        perm = np.random.default_rng(plan.seed).permutation(n)
        n_train = int(round(plan.ratios[0] * n))
        n_val = int(round(plan.ratios[1] * n))
        parts = [perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]]
    else:
        groups = _assign_subjects(dataset, plan)
        if (groups[0] & groups[1]) or (groups[0] & groups[2]) or (groups[1] & groups[2]):
            raise RuntimeError("subject leakage between splits")
        parts = [np.flatnonzero(np.isin(dataset.subjects, sorted(g))) for g in groups]

    names = ("train", "val", "test")
    for name, idx in zip(names, parts):
        if len(idx) == 0:
            raise ConfigError(f"{name} split is empty")
    return tuple(dataset.subset(idx, f"{dataset.name}:{name}") for name, idx in zip(names, parts))


# -- preprocessing ------------------------------------------------------------------


def standard_scale(data):
    """Scale every trial to zero mean and unit population std per channel.

    Accepts one trial ``(T, C)``, a stack ``(n, T, C)`` (each trial scaled on
    its own statistics) or a :class:`Dataset`. Constant channels become zeros
    and trigger a warning.
    """
    if isinstance(data, Dataset):
        return Dataset(standard_scale(data.series), data.labels, data.subjects, data.n_classes,
                       data.sampling_rate_hz, data.name, data.provenance)
    x = np.asarray(data)
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (T, C) or (n, T, C), got {x.shape}")
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-2, keepdims=True)
    sd = x64.std(axis=-2, keepdims=True)
    flat = sd == 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} zero-variance channel(s) scaled to zeros", RuntimeWarning,
                      stacklevel=2)
    out = np.where(flat, 0.0, (x64 - mu) / np.where(flat, 1.0, sd))
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def window(trial: np.ndarray, window_len: int, overlap_fraction: float = 0.0) -> list[np.ndarray]:
    """Cut a ``(T_trial, C)`` trial into windows; partial tail windows are dropped."""
    if not 0.0 <= overlap_fraction < 1.0:
        raise ConfigError(f"overlap fraction must lie in [0, 1), got {overlap_fraction}")
    if window_len < 1:
        raise ConfigError(f"window length must be >= 1, got {window_len}")
    trial = np.asarray(trial)
    stride = max(1, int(round(window_len * (1.0 - overlap_fraction))))
    starts = range(0, trial.shape[0] - window_len + 1, stride)
    return [trial[s:s + window_len] for s in starts]


def from_trials(trials: Sequence[np.ndarray], labels: Sequence[int], subjects: Sequence[int],
                n_classes: int, window_len: int, overlap: float = 0.0, scale: bool = True,
                **meta) -> Dataset:
    """Turn long trials into fixed-length samples (optionally scaling each trial first)."""
    xs, ys, ss = [], [], []
    for trial, label, subject in zip(trials, labels, subjects):
        trial = standard_scale(trial) if scale else np.asarray(trial)
        for w in window(trial, window_len, overlap):
            xs.append(w)
            ys.append(label)
            ss.append(subject)
    if not xs:
        raise ShapeError("no trial is long enough for a single window")
    return Dataset(np.stack(xs), ys, ss, n_classes, **meta)


# -- synthetic data -------------------------------------------------------------------


def synth_generate(n_subjects: int, samples_per_subject: int, seq_len: int, n_channels: int,
                   n_classes: int, difficulty: float = 0.0, seed: int = 0,
                   sampling_rate_hz: float | None = None) -> Dataset:
    """Seeded synthetic classification data with per-subject nuisance.

    Class ``k`` is a sinusoid at its own frequency (random phase per sample)
    spread over a class-specific subset of channels with fixed weights. Each
    subject adds a per-channel offset and AR(1) noise with a subject-specific
    coefficient; white noise comes on top. All nuisance terms scale with
    ``difficulty``; at 0 the classes are noise-free sinusoids. Labels cycle
    over the global sample index, so the histogram is balanced to within one.
    """
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if min(n_subjects, samples_per_subject, seq_len, n_channels) < 1:
        raise ConfigError("synthetic dataset dimensions must be positive")
    if difficulty < 0:
        raise ConfigError(f"difficulty must be >= 0, got {difficulty}")
    fs = float(sampling_rate_hz or seq_len)
    rng = np.random.default_rng(seed)

    top = max(3.5, fs / 4.0)
    freqs = np.linspace(3.0, top, n_classes)
    subset_size = max(1, (n_channels + 1) // 2)
    mixing = np.zeros((n_classes, n_channels))
    for k in range(n_classes):
        chans = rng.choice(n_channels, size=subset_size, replace=False)
        mixing[k, chans] = rng.uniform(0.5, 1.0, size=subset_size)

    n = n_subjects * samples_per_subject
    labels = np.arange(n) % n_classes
    subjects = np.repeat(np.arange(n_subjects), samples_per_subject)
    t = np.arange(seq_len) / fs
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    wave = np.sin(2.0 * np.pi * freqs[labels][:, None] * t[None, :] + phase[:, None])
    series = wave[:, :, None] * mixing[labels][:, None, :]

    offsets = rng.normal(0.0, 1.0, size=(n_subjects, n_channels))
    ar_coef = rng.uniform(0.5, 0.95, size=n_subjects)
    for s in range(n_subjects):
        rows = slice(s * samples_per_subject, (s + 1) * samples_per_subject)
        innov = rng.normal(0.0, np.sqrt(1.0 - ar_coef[s] ** 2),
                           size=(samples_per_subject, seq_len, n_channels))
        ar = lfilter([1.0], [1.0, -ar_coef[s]], innov, axis=1)
        series[rows] += difficulty * (offsets[s] + ar)
    series += difficulty * rng.normal(0.0, 1.0, size=series.shape)

    return Dataset(series.astype(np.float32), labels, subjects, n_classes, fs,
                   name=f"synth-s{seed}",
                   provenance=(f"synth_generate(n_subjects={n_subjects}, samples_per_subject="
                               f"{samples_per_subject}, T={seq_len}, C={n_channels}, K={n_classes}, "
                               f"difficulty={difficulty}, seed={seed})"))


# -- file format ----------------------------------------------------------------------


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest")


def _record_dtype(t: int, c: int) -> np.dtype:
    return np.dtype([("subject", "<u4"), ("label", "<u2"), ("series", "<f4", (t, c))])


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    n, t, c = dataset.series.shape
    if dataset.subjects.min() < 0 or dataset.subjects.max() > 0xFFFFFFFF:
        raise ConfigError("subject ids must fit in u32")
    if dataset.n_classes > 0xFFFF:
        raise ConfigError("labels must fit in u16")
    records = np.empty(n, dtype=_record_dtype(t, c))
    records["subject"] = dataset.subjects
    records["label"] = dataset.labels
    records["series"] = dataset.series
    header = _HEADER.pack(DATA_MAGIC, DATA_VERSION, n, t, c, dataset.n_classes,
                          dataset.sampling_rate_hz)
    path.write_bytes(header + records.tobytes())
    manifest = [f"name={dataset.name}", f"provenance={dataset.provenance}",
                f"format_version={DATA_VERSION}"]
    _manifest_path(path).write_text("\n".join(manifest) + "\n", encoding="utf-8")


def _read_manifest(path: Path) -> dict[str, str]:
    mpath = _manifest_path(path)
    if not mpath.exists():
        return {}
    out = {}
    for line in mpath.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, version, n, t, c, k, fs = _HEADER.unpack_from(buf)
    if magic != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if n == 0 or t == 0 or c == 0 or k == 0:
        raise FormatError(f"{path}: malformed header (n={n}, T={t}, C={c}, K={k})")
    rec = _record_dtype(t, c)
    expected = _HEADER.size + n * rec.itemsize
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated, expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} unexpected trailing bytes")
    records = np.frombuffer(buf, dtype=rec, count=n, offset=_HEADER.size)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise FormatError(f"{path}: record {int(bad[0])} has label {labels[bad[0]]} >= K={k}")
    meta = _read_manifest(path)
    return Dataset(records["series"].astype(np.float32), labels,
                   records["subject"].astype(np.int64), int(k), float(fs),
                   name=meta.get("name", path.stem), provenance=meta.get("provenance", ""))
