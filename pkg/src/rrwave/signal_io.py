"""Dataset ingestion, synthetic PPG generation, resampling and windowing.

Dataset layout is one directory per subject holding ``ppg.csv``
(``t_seconds,value``) and ``rr.csv`` (``t_seconds,rr_bpm``).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import (EmptySignal, InvalidSpec, MalformedRow, MissingFile, NonMonotonicTimestamps,
                     ValidationError, WindowLongerThanSignal)

log = logging.getLogger(__name__)

SR = 50
WINDOW_SIZES = (16, 32, 64)
WINDOWS_MAGIC = b"RRWD"
WINDOWS_VERSION = 1


@dataclass
class PpgRecord:
    subject_id: str
    fs_raw: float
    samples: np.ndarray
    rr_ref: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (t_seconds, rr_bpm) rows

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.rr_ref = np.asarray(self.rr_ref, dtype=np.float64).reshape(-1, 2)
        if self.fs_raw <= 0:
            raise ValidationError(f"fs_raw must be positive, got {self.fs_raw}")
        if self.samples.size == 0:
            raise EmptySignal(f"subject {self.subject_id}: no samples")
        if len(self.rr_ref) > 1 and np.any(np.diff(self.rr_ref[:, 0]) <= 0):
            raise NonMonotonicTimestamps(f"subject {self.subject_id}: rr_ref timestamps not increasing")
        if len(self.rr_ref) and (np.any(self.rr_ref[:, 1] < 0) or np.any(self.rr_ref[:, 1] > 120)):
            raise ValidationError(f"subject {self.subject_id}: rr_bpm outside [0, 120]")

    @property
    def duration(self):
        return len(self.samples) / self.fs_raw


@dataclass
class WindowSample:
    subject_id: str
    start_t: float
    w: int
    values: np.ndarray
    label_bpm: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (SR * self.w,):
            raise ValidationError(f"window needs {SR * self.w} values, got {self.values.shape}")
        if not 0.0 <= self.label_bpm <= 120.0:
            raise ValidationError(f"label {self.label_bpm} outside [0, 120]")


@dataclass(frozen=True)
class SyntheticSpec:
    duration_s: float = 480.0
    hr_bpm: float = 75.0
    rr_bpm: float = 15.0
    riiv_depth: float = 0.1
    riav_depth: float = 0.1
    rifv_depth: float = 0.05
    noise_std: float = 0.0
    seed: int = 0
    fs: float = 125.0

    def validate(self):
        if self.duration_s <= 0 or self.fs <= 0:
            raise InvalidSpec("duration_s and fs must be positive")
        if not 0 < self.rr_bpm < self.hr_bpm:
            raise InvalidSpec(f"need 0 < rr_bpm < hr_bpm, got rr={self.rr_bpm}, hr={self.hr_bpm}")
        if self.rr_bpm > 120:
            raise InvalidSpec("rr_bpm above 120")
        for name in ("riiv_depth", "riav_depth", "rifv_depth"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1)")
        if self.noise_std < 0:
            raise InvalidSpec("noise_std must be >= 0")


# ---------------------------------------------------------------- file I/O


def _read_two_column_csv(path, header):
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != list(header):
            raise MalformedRow(path, 1, f"expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise MalformedRow(path, lineno, f"expected 2 columns, got {len(row)}")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise MalformedRow(path, lineno, "non-numeric value") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise MalformedRow(path, lineno, "NaN or infinite value")
            rows.append((t, v))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def load_record(path) -> PpgRecord:
    """Read one subject directory.  The sampling rate is inferred from the PPG timestamps."""
    path = Path(path)
    ppg = _read_two_column_csv(path / "ppg.csv", ("t_seconds", "value"))
    rr = _read_two_column_csv(path / "rr.csv", ("t_seconds", "rr_bpm"))
    if len(ppg) == 0:
        raise EmptySignal(f"{path / 'ppg.csv'} has no rows")
    if len(ppg) < 2:
        raise MalformedRow(path / "ppg.csv", 2, "need at least two rows to infer the sampling rate")
    dt = np.diff(ppg[:, 0])
    if np.any(dt <= 0):
        raise NonMonotonicTimestamps(f"{path / 'ppg.csv'}: timestamps not strictly increasing")
    if len(rr) > 1 and np.any(np.diff(rr[:, 0]) <= 0):
        raise NonMonotonicTimestamps(f"{path / 'rr.csv'}: timestamps not strictly increasing")
    fs = round(1.0 / float(np.median(dt)), 6)
    return PpgRecord(subject_id=path.name, fs_raw=fs, samples=ppg[:, 1], rr_ref=rr)


def save_record(record: PpgRecord, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t = np.arange(len(record.samples)) / record.fs_raw
    ppg = "t_seconds,value\n" + "".join(f"{a:.6f},{b:.9g}\n" for a, b in zip(t, record.samples))
    rr = "t_seconds,rr_bpm\n" + "".join(f"{a:.6f},{b:.9g}\n" for a, b in record.rr_ref)
    container.atomic_write(path / "ppg.csv", ppg)
    container.atomic_write(path / "rr.csv", rr)


def list_subjects(data_dir):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise MissingFile(f"data directory {data_dir} does not exist")
    dirs = sorted(p for p in data_dir.iterdir() if p.is_dir() and (p / "ppg.csv").exists())
    if not dirs:
        raise MissingFile(f"no subject directories with ppg.csv under {data_dir}")
    return dirs


# ---------------------------------------------------------------- processing


def resample(record: PpgRecord, fs_target: float = SR) -> PpgRecord:
    """Linear-interpolation resampling onto ``k / fs_target`` for every k that lies
    inside the original time span (no extrapolation, first sample kept)."""
    if fs_target <= 0:
        raise ValidationError("fs_target must be positive")
    x = record.samples
    if x.size == 0:
        raise EmptySignal("cannot resample an empty signal")
    if fs_target == record.fs_raw:
        out = x.copy()
    else:
        n_new = int(math.floor((len(x) - 1) * fs_target / record.fs_raw + 1e-9)) + 1
        t_old = np.arange(len(x)) / record.fs_raw
        t_new = np.arange(n_new) / fs_target
        out = np.interp(t_new, t_old, x)
    return PpgRecord(record.subject_id, float(fs_target), out, record.rr_ref.copy())


def window_count(duration, w, stride):
    return int(math.floor((duration - w) / stride + 1e-9)) + 1


def slide_windows(record: PpgRecord, w: int, stride: float = 2.0):
    """Cut fixed-length windows every ``stride`` seconds.

    Each label is the mean of the reference RR values timestamped inside
    ``[start, start + w)``; windows without any reference value are dropped.
    """
    if record.fs_raw != SR:
        raise ValidationError(f"slide_windows expects {SR} Hz input, got {record.fs_raw}")
    n = SR * w
    if n > len(record.samples):
        raise WindowLongerThanSignal(f"window of {w} s longer than {record.duration:.2f} s signal")
    if stride <= 0:
        raise ValidationError("stride must be positive")
    t_ref, rr = record.rr_ref[:, 0], record.rr_ref[:, 1]
    out, dropped = [], 0
    for j in range(window_count(record.duration, w, stride)):
        start_t = j * stride
        i = int(round(start_t * SR))
        if i + n > len(record.samples):
            break
        inside = (t_ref >= start_t) & (t_ref < start_t + w)
        if not inside.any():
            dropped += 1
            continue
        out.append(WindowSample(record.subject_id, float(start_t), w, record.samples[i:i + n].copy(),
                                float(rr[inside].mean())))
    if dropped:
        log.warning("subject %s: dropped %d window(s) with no reference RR", record.subject_id, dropped)
    return out


# ---------------------------------------------------------------- synthesis


def _pulse(u):
    """Systolic + dicrotic Gaussian pulse as a function of cardiac phase in [0, 1)."""
    return np.exp(-0.5 * ((u - 0.3) / 0.1) ** 2) + 0.4 * np.exp(-0.5 * ((u - 0.62) / 0.12) ** 2)


def synthesize(spec: SyntheticSpec, subject_id="synthetic") -> PpgRecord:
    """Pulse train at ``hr_bpm`` with respiratory baseline (RIIV), amplitude
    (RIAV) and beat-frequency (RIFV) modulation at ``rr_bpm``, plus white noise."""
    spec.validate()
    n = int(round(spec.duration_s * spec.fs))
    t = np.arange(n) / spec.fs
    f_h, f_r = spec.hr_bpm / 60.0, spec.rr_bpm / 60.0
    resp = np.sin(2 * np.pi * f_r * t)
    # integral of f_h * (1 + rifv * sin(2 pi f_r t))
    cycles = f_h * t
    if spec.rifv_depth:
        cycles = cycles + f_h * spec.rifv_depth * (1.0 - np.cos(2 * np.pi * f_r * t)) / (2 * np.pi * f_r)
    x = (1.0 + spec.riav_depth * resp) * _pulse(np.mod(cycles, 1.0)) + spec.riiv_depth * resp
    if spec.noise_std:
        x = x + np.random.default_rng(spec.seed).normal(0.0, spec.noise_std, size=n)
    t_ref = np.arange(int(math.floor(spec.duration_s)) + 1, dtype=np.float64)
    t_ref = t_ref[t_ref < spec.duration_s]
    rr_ref = np.column_stack([t_ref, np.full(len(t_ref), float(spec.rr_bpm))])
    return PpgRecord(subject_id, float(spec.fs), x, rr_ref)


def synthetic_cohort(n_subjects, seed=0, rr_range=(8.0, 30.0), hr_range=(55.0, 100.0),
                     noise_range=(0.0, 0.05), duration_s=480.0, fs=125.0, rr_segment_s=60.0):
    """Distinct subjects with random HR, modulation depths, noise level and RR.

    Each subject's RR is redrawn every ``rr_segment_s`` seconds so a subject
    contributes a spread of labels; respiratory and cardiac phases are
    integrated continuously across the changes.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    records = []
    for i in range(n_subjects):
        hr = float(rng.uniform(*hr_range))
        noise = float(rng.uniform(*noise_range))
        riiv, riav, rifv = rng.uniform(0.05, 0.25, size=3)
        rifv *= 0.4
        n_seg = max(1, int(math.ceil(duration_s / rr_segment_s)))
        rates = np.minimum(rng.uniform(rr_range[0], rr_range[1], size=n_seg), hr - 1.0)
        rr_t = rates[np.minimum((t // rr_segment_s).astype(int), n_seg - 1)]
        resp = np.sin(2 * np.pi * np.cumsum(rr_t / 60.0) / fs)
        cycles = np.cumsum(hr / 60.0 * (1.0 + rifv * resp)) / fs
        x = (1.0 + riav * resp) * _pulse(np.mod(cycles, 1.0)) + riiv * resp
        x = x + rng.normal(0.0, noise, size=n) if noise else x
        t_ref = np.arange(int(math.ceil(duration_s)), dtype=np.float64)
        rr_ref = np.column_stack([t_ref, rates[np.minimum((t_ref // rr_segment_s).astype(int), n_seg - 1)]])
        records.append(PpgRecord(f"s{i:02d}", float(fs), x, rr_ref))
    return records


# ---------------------------------------------------------------- window store


def windows_to_arrays(windows):
    values = np.stack([w.values for w in windows]) if windows else np.zeros((0, 0))
    labels = np.array([w.label_bpm for w in windows], dtype=np.float64)
    return values, labels


def save_windows(path, windows, w, stride, extra=None):
    header = {
        "w": int(w), "stride": float(stride), "sr": SR,
        "subjects": [x.subject_id for x in windows],
        "start_t": [x.start_t for x in windows],
        "labels": [x.label_bpm for x in windows],
    }
    if extra:
        header.update(extra)
    values = np.stack([x.values for x in windows]) if windows else np.zeros((0, SR * w))
    container.atomic_write(path, container.encode(WINDOWS_MAGIC, WINDOWS_VERSION, header, {"values": values}))


def load_windows(path):
    """Read a window store; returns ``(windows, header)``.  Values come back as float64 of the stored float32."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    _, header, tensors = container.decode(path.read_bytes(), WINDOWS_MAGIC, {WINDOWS_VERSION})
    w = int(header["w"])
    values = tensors["values"].astype(np.float64)
    windows = [WindowSample(s, float(t), w, v, float(y))
               for s, t, v, y in zip(header["subjects"], header["start_t"], values, header["labels"])]
    return windows, header
