"""Synthetic ECG generation, preprocessing, CSV I/O, and splits.

The generator builds each beat from Gaussian-shaped P/QRS/T waves placed
on a rhythm-dependent RR grid, so QRS annotations are exact by
construction. Preprocessing follows the band-pass + per-window
standardization chain used for training.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .errors import ConfigError, ShapeError

RHYTHMS = ("regular", "af_like", "bigeminy")
MORPHOLOGIES = ("normal_qrs", "wide_qrs", "st_shift")
WINDOW_SECONDS = 10.0
SEG_TOLERANCE_SECONDS = 0.075

# Per-lead projection gains for pseudo multi-lead records (cycled when a
# record has more than 12 leads).
LEAD_GAINS = (1.0, 0.85, 0.7, 0.9, 0.6, 0.75, 0.95, 0.8, 0.65, 0.55, 0.88, 0.72)


@dataclass
class EcgRecord:
    signal: np.ndarray  # (leads, samples), millivolts
    fs: float
    qrs_locations: np.ndarray | None = None  # sorted sample indices
    labels: frozenset | None = None  # class IDs
    patient_id: str = ""

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float32)
        if self.signal.ndim != 2:
            raise ShapeError(f"record signal must be (leads, samples), got {self.signal.shape}")
        if self.fs <= 0:
            raise ConfigError(f"sampling rate must be positive, got {self.fs}")
        if self.qrs_locations is not None:
            q = np.asarray(self.qrs_locations, dtype=np.int64)
            if q.size and (np.any(np.diff(q) <= 0) or q[0] < 0 or q[-1] >= self.signal.shape[1]):
                raise ConfigError("qrs_locations must be strictly increasing and in range")
            self.qrs_locations = q
        if self.labels is not None:
            self.labels = frozenset(int(c) for c in self.labels)

    @property
    def leads(self):
        return self.signal.shape[0]

    @property
    def samples(self):
        return self.signal.shape[1]


@dataclass
class SynthConfig:
    fs: float = 250.0
    duration: float = 10.0
    leads: int = 1
    heart_rate: tuple = (55.0, 95.0)
    rhythm: str = "regular"
    morphologies: tuple = ("normal_qrs",)
    snr_db: float | None = None  # None = clean
    seed: int = 0
    n_records: int = 1
    labels: frozenset | None = None
    patient_prefix: str = "p"

    def validate(self):
        if self.duration * self.fs < 32:
            raise ConfigError("duration * fs must be at least 32 samples")
        if self.leads < 1:
            raise ConfigError("leads must be >= 1")
        if self.rhythm not in RHYTHMS:
            raise ConfigError(f"unknown rhythm {self.rhythm!r}, expected one of {RHYTHMS}")
        morphs = tuple(self.morphologies)
        for m in morphs:
            if m not in MORPHOLOGIES:
                raise ConfigError(f"unknown morphology {m!r}, expected one of {MORPHOLOGIES}")
        if not morphs:
            raise ConfigError("morphology set must not be empty")
        if "normal_qrs" in morphs and "wide_qrs" in morphs:
            raise ConfigError("invalid class combination: normal_qrs and wide_qrs are exclusive")
        if not (0 < self.heart_rate[0] <= self.heart_rate[1]):
            raise ConfigError(f"invalid heart-rate range {self.heart_rate}")


def _gauss(t, center, sigma, amp):
    return amp * np.exp(-0.5 * ((t - center) / sigma) ** 2)


def _smooth_box(t, start, end, tau=0.01):
    return 1.0 / (1.0 + np.exp(-(t - start) / tau)) - 1.0 / (1.0 + np.exp(-(t - end) / tau))


def _beat_waveform(t_rel, morphs, rng):
    """One beat sampled at times relative to the R peak (seconds)."""
    wide = "wide_qrs" in morphs
    r_sigma = 0.030 if wide else 0.012
    r_amp = 0.9 if wide else 1.1
    s_center = 0.030 + (0.030 if wide else 0.0)
    y = _gauss(t_rel, -0.17, 0.025, 0.12)                    # P
    y += _gauss(t_rel, -0.028 - (0.02 if wide else 0.0), 0.010, -0.12)  # Q
    y += _gauss(t_rel, 0.0, r_sigma, r_amp)                  # R
    y += _gauss(t_rel, s_center, 0.012, -0.22)               # S
    y += _gauss(t_rel, 0.30, 0.055, 0.28)                    # T
    if "st_shift" in morphs:
        y += 0.18 * _smooth_box(t_rel, 0.06, 0.22)
    return y


def _rr_series(rng, rhythm, base_rr, duration):
    times = [float(rng.uniform(0.0, base_rr))]
    toggle = 0
    while True:
        if rhythm == "regular":
            rr = base_rr
        elif rhythm == "af_like":
            rr = base_rr * float(rng.lognormal(0.0, 0.18))
        else:  # bigeminy: alternating short/long couplets
            rr = base_rr * (0.72 if toggle else 1.28)
            toggle ^= 1
        nxt = times[-1] + rr
        if nxt >= duration:
            break
        times.append(nxt)
    return np.asarray(times)


def synth_ecg(config: SynthConfig):
    """Generate ``config.n_records`` annotated records, one RNG per record."""
    config.validate()
    children = np.random.SeedSequence(config.seed).spawn(config.n_records)
    records = []
    for i, ss in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(ss))
        records.append(_synth_one(config, rng, f"{config.patient_prefix}{config.seed}_{i:05d}"))
    return records


def _synth_one(config, rng, patient_id):
    fs = config.fs
    n = int(round(config.duration * fs))
    t = np.arange(n) / fs
    hr = rng.uniform(config.heart_rate[0], config.heart_rate[1])
    beat_times = _rr_series(rng, config.rhythm, 60.0 / hr, config.duration)
    base = np.zeros(n)
    for bt in beat_times:
        lo = max(0, int((bt - 0.6) * fs))
        hi = min(n, int((bt + 0.7) * fs) + 1)
        base[lo:hi] += _beat_waveform(t[lo:hi] - bt, config.morphologies, rng)
    qrs = np.round(beat_times * fs).astype(np.int64)
    qrs = qrs[(qrs >= 0) & (qrs < n)]

    signal = np.empty((config.leads, n), dtype=np.float64)
    for lead in range(config.leads):
        gain = LEAD_GAINS[lead % len(LEAD_GAINS)] * rng.uniform(0.92, 1.08)
        signal[lead] = gain * base
    if config.snr_db is not None and math.isfinite(config.snr_db):
        for lead in range(config.leads):
            noise = rng.standard_normal(n)
            noise = bandpass(noise[None, :], fs)[0]
            rms_sig = np.sqrt(np.mean(signal[lead] ** 2))
            rms_noise = np.sqrt(np.mean(noise ** 2))
            scale = rms_sig / (rms_noise * 10.0 ** (config.snr_db / 20.0))
            signal[lead] += scale * noise
    return EcgRecord(
        signal=signal.astype(np.float32), fs=fs, qrs_locations=qrs,
        labels=config.labels, patient_id=patient_id,
    )


# ---------------------------------------------------------------------------
# preprocessing

# Corner widening keeps the nominal band inside 1 dB after the
# forward-backward (magnitude-squared) pass of the order-4 design.
_CORNER_FACTOR = 1.302


def bandpass(signal, fs, lo=0.5, hi=45.0):
    """Zero-phase Butterworth band-pass along the last axis."""
    if hi * _CORNER_FACTOR >= fs / 2:
        raise ConfigError(
            f"sampling rate {fs} Hz too low for a {hi} Hz band edge (needs fs > {2 * hi * _CORNER_FACTOR:.0f})"
        )
    sos = butter(4, [lo / _CORNER_FACTOR, hi * _CORNER_FACTOR], btype="bandpass", fs=fs, output="sos")
    return sosfiltfilt(sos, np.asarray(signal, dtype=np.float64), axis=-1)


def window_and_normalize(record, window_seconds=WINDOW_SECONDS):
    """Cut non-overlapping windows, standardize per lead, re-index annotations.

    The trailing remainder shorter than one window is dropped; constant
    leads map to all-zeros.
    """
    win = int(round(window_seconds * record.fs))
    n_windows = record.samples // win
    out = []
    for w in range(n_windows):
        sl = record.signal[:, w * win:(w + 1) * win].astype(np.float64)
        mu = sl.mean(axis=1, keepdims=True)
        sd = sl.std(axis=1, keepdims=True)
        normalized = np.where(sd > 1e-12, (sl - mu) / np.where(sd > 1e-12, sd, 1.0), 0.0)
        qrs = None
        if record.qrs_locations is not None:
            mask = (record.qrs_locations >= w * win) & (record.qrs_locations < (w + 1) * win)
            qrs = record.qrs_locations[mask] - w * win
        out.append(EcgRecord(
            signal=normalized.astype(np.float32), fs=record.fs, qrs_locations=qrs,
            labels=record.labels, patient_id=record.patient_id,
        ))
    return out


def preprocess(record, window_seconds=WINDOW_SECONDS, lo=0.5, hi=45.0):
    """Band-pass then window/normalize; the paper-style training chain."""
    filtered = EcgRecord(
        signal=bandpass(record.signal, record.fs, lo, hi).astype(np.float32),
        fs=record.fs, qrs_locations=record.qrs_locations,
        labels=record.labels, patient_id=record.patient_id,
    )
    return window_and_normalize(filtered, window_seconds)


def rasterize_qrs(qrs, window_len, fs):
    """Per-position binary targets at quarter resolution.

    Position p is positive iff an annotated R peak lies within
    +-floor(0.075 * fs) original samples of sample 4p.
    """
    L0 = -(-window_len // 4)
    target = np.zeros(L0, dtype=np.float32)
    if qrs is None or len(qrs) == 0:
        return target
    tol = int(SEG_TOLERANCE_SECONDS * fs)
    pos = 4 * np.arange(L0)
    for q in qrs:
        target[np.abs(pos - q) <= tol] = 1.0
    return target


# ---------------------------------------------------------------------------
# CSV dataset I/O

def save_csv(records, path):
    """Write one ``rec_NNNNN.csv`` (+ annotation sidecars) per record.

    Layout: line 1 holds ``fs,leads,patient_id``; every further line has
    one column per lead. A ``.ann`` sidecar lists QRS sample indices one
    per line; a ``.labels`` sidecar holds one comma-separated line of
    class IDs.
    """
    os.makedirs(path, exist_ok=True)
    paths = []
    for i, rec in enumerate(records):
        base = os.path.join(path, f"rec_{i:05d}")
        with open(base + ".csv", "w") as f:
            f.write(f"{rec.fs!r},{rec.leads},{rec.patient_id}\n")
            np.savetxt(f, rec.signal.T, fmt="%.8e", delimiter=",")
        if rec.qrs_locations is not None:
            with open(base + ".ann", "w") as f:
                for q in rec.qrs_locations:
                    f.write(f"{int(q)}\n")
        if rec.labels is not None:
            with open(base + ".labels", "w") as f:
                f.write(",".join(str(c) for c in sorted(rec.labels)) + "\n")
        paths.append(base + ".csv")
    return paths


def load_csv(path):
    """Load one record file or every ``*.csv`` in a directory."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".csv")
        )
        out = []
        for f in files:
            out.extend(load_csv(f))
        return out
    return [_load_one_csv(path)]


def _load_one_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        parts = header.split(",")
        if len(parts) != 3:
            raise ConfigError(f"{path}: line 1: expected 'fs,leads,patient_id', got {header!r}")
        try:
            fs = float(parts[0])
            leads = int(parts[1])
        except ValueError as exc:
            raise ConfigError(f"{path}: line 1: {exc}") from exc
        patient_id = parts[2]
        try:
            data = np.loadtxt(f, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ConfigError(f"{path}: signal block: {exc}") from exc
    if data.shape[1] != leads:
        raise ConfigError(
            f"{path}: line 2: header declares {leads} leads but rows have {data.shape[1]} columns"
        )
    base = path[:-4]
    qrs = None
    labels = None
    if os.path.exists(base + ".ann"):
        with open(base + ".ann") as f:
            vals = [int(line) for line in f.read().split() if line.strip()]
        qrs = np.asarray(vals, dtype=np.int64)
    if os.path.exists(base + ".labels"):
        with open(base + ".labels") as f:
            text = f.read().strip()
        labels = frozenset(int(c) for c in text.split(",")) if text else frozenset()
    return EcgRecord(signal=data.T.astype(np.float32), fs=fs,
                     qrs_locations=qrs, labels=labels, patient_id=patient_id)


# ---------------------------------------------------------------------------
# splitting

def split(records, fractions=(0.6, 0.2, 0.2), stratify_by_patient=True, seed=0):
    """Deterministic train/val/test split; no patient straddles folds."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ConfigError(f"split fractions must be three values summing to 1, got {fractions}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if stratify_by_patient:
        patients = sorted({r.patient_id for r in records})
        needed = sum(1 for f in fractions if f > 0)
        if len(patients) < needed:
            raise ConfigError(
                f"cannot stratify {len(patients)} patients into {needed} non-empty folds"
            )
        order = [patients[i] for i in rng.permutation(len(patients))]
        n_train = round(fractions[0] * len(patients))
        n_val = round(fractions[1] * len(patients))
        folds = (set(order[:n_train]), set(order[n_train:n_train + n_val]),
                 set(order[n_train + n_val:]))
        return tuple([r for r in records if r.patient_id in fold] for fold in folds)
    order = rng.permutation(len(records))
    n_train = round(fractions[0] * len(records))
    n_val = round(fractions[1] * len(records))
    idx = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([records[i] for i in sorted(part)] for part in idx)


# ---------------------------------------------------------------------------
# task dataset assembly

@dataclass
class TaskData:
    """Preprocessed arrays for one task, split into three folds."""

    mode: str  # "seg" | "cls"
    fs: float
    x: dict = field(default_factory=dict)        # fold -> (n, leads, L) float32
    y: dict = field(default_factory=dict)        # fold -> (n, L0) or (n, K) float32
    qrs: dict = field(default_factory=dict)      # fold -> list of index arrays
    n_classes: int | None = None

    def fold(self, name):
        return self.x[name], self.y[name]


def build_task_data(mode, configs, seed, fractions=(0.7, 0.15, 0.15), n_classes=None):
    """Generate, preprocess, and split records from one or more generator configs.

    ``configs`` is a list of :class:`SynthConfig`; for classification each
    config carries the label set of its variant.
    """
    records = []
    for cfg in configs:
        records.extend(synth_ecg(cfg))
    return task_data_from_records(mode, records, seed, fractions, n_classes)


def task_data_from_records(mode, records, seed, fractions=(0.7, 0.15, 0.15), n_classes=None):
    """Preprocess and split already-loaded records into task arrays."""
    if not records:
        raise ConfigError("no records to build task data from")
    folds = split(records, fractions, stratify_by_patient=True, seed=seed)
    data = TaskData(mode=mode, fs=records[0].fs, n_classes=n_classes)
    for name, fold_records in zip(("train", "val", "test"), folds):
        windows = []
        for rec in fold_records:
            windows.extend(preprocess(rec))
        if not windows:
            raise ConfigError(f"fold {name!r} is empty; increase n_records")
        x = np.stack([w.signal for w in windows]).astype(np.float32)
        data.x[name] = x
        data.qrs[name] = [w.qrs_locations if w.qrs_locations is not None
                          else np.empty(0, dtype=np.int64) for w in windows]
        if mode == "seg":
            L = x.shape[2]
            data.y[name] = np.stack([
                rasterize_qrs(w.qrs_locations, L, w.fs) for w in windows
            ])
        else:
            if n_classes is None:
                raise ConfigError("n_classes required for classification data")
            y = np.zeros((len(windows), n_classes), dtype=np.float32)
            for i, w in enumerate(windows):
                for c in (w.labels or ()):
                    if not 0 <= c < n_classes:
                        raise ConfigError(f"label {c} out of range for {n_classes} classes")
                    y[i, c] = 1.0
            data.y[name] = y
    return data


def task_data_from_config(task_cfg, seq_seed, task_index):
    """Build a :class:`TaskData` from a task config's synth spec or CSV path.

    Seeds are derived from (sequence seed, task index, variant index) so
    regenerating any task of a sequence is reproducible in isolation.
    """
    if task_cfg.path is not None:
        records = load_csv(task_cfg.path)
        seed = int(np.random.SeedSequence([seq_seed, task_index, 999]).generate_state(1)[0])
        return task_data_from_records(task_cfg.mode, records, seed,
                                      task_cfg.fractions, task_cfg.n_classes)
    spec = task_cfg.synth
    per_variant = max(1, spec.n_records // len(spec.variants))
    configs = []
    for vi, var in enumerate(spec.variants):
        seed = int(np.random.SeedSequence([seq_seed, task_index, vi]).generate_state(1)[0])
        labels = frozenset([var.label]) if var.label is not None else None
        configs.append(SynthConfig(
            fs=spec.fs, duration=spec.duration, leads=task_cfg.leads,
            heart_rate=tuple(spec.heart_rate), rhythm=var.rhythm,
            morphologies=tuple(var.morphologies), snr_db=spec.snr_db,
            seed=seed, n_records=per_variant, labels=labels,
            patient_prefix=f"t{task_index}v{vi}_",
        ))
    split_seed = int(np.random.SeedSequence([seq_seed, task_index, 999]).generate_state(1)[0])
    return build_task_data(task_cfg.mode, configs, split_seed,
                           task_cfg.fractions, task_cfg.n_classes)
