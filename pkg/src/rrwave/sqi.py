"""Window quality index: fraction of non-flat samples times peak-detector agreement.

A window is kept when ``k * f1 >= threshold`` (0.9 by default).  ``k`` is the
share of samples outside flat runs; ``f1`` measures how well two unrelated
peak detectors agree, with peaks closer than 150 ms counted as the same beat.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .errors import EmptyWindow
from .signal_io import SR

FLAT_DELTA = 0.02
FLAT_MIN_RUN = 30
COINCIDENCE_S = 0.150
THRESHOLD = 0.9


@dataclass
class SqiReport:
    k: float
    f1: float
    sqi: float
    peaks_a: np.ndarray
    peaks_b: np.ndarray
    accepted: bool


def flatline_fraction(values, delta=FLAT_DELTA, min_run=FLAT_MIN_RUN) -> float:
    """Share of samples not inside a run of ``>= min_run`` points whose
    successive absolute differences are all below ``delta``."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n == 0:
        raise EmptyWindow("flatline_fraction of an empty window")
    small = np.abs(np.diff(x)) < delta
    flat = np.zeros(n, dtype=bool)
    # run of m small steps spans m + 1 points
    edges = np.flatnonzero(np.diff(np.concatenate(([0], small.astype(np.int8), [0]))))
    for start, stop in zip(edges[::2], edges[1::2]):
        if stop - start + 1 >= min_run:
            flat[start:stop + 1] = True
    return float((n - flat.sum()) / n)


def detect_peaks_a(values, fs=SR):
    """Local maxima with prominence >= 0.3 * IQR, at least 0.3 s apart."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 3:
        return np.zeros(0, dtype=np.int64)
    q75, q25 = np.percentile(x, [75, 25])
    iqr = q75 - q25
    if iqr <= 0:
        return np.zeros(0, dtype=np.int64)
    peaks, _ = find_peaks(x, prominence=0.3 * iqr, distance=max(1, int(round(0.3 * fs))))
    return peaks.astype(np.int64)


def slope_sum(values, fs=SR, window_s=0.26):
    """Sum of the positive first differences over the trailing ``window_s`` seconds."""
    x = np.asarray(values, dtype=np.float64)
    du = np.maximum(np.diff(x, prepend=x[:1]), 0.0)
    w = max(1, int(round(window_s * fs)))
    c = np.cumsum(du)
    out = c.copy()
    out[w:] = c[w:] - c[:-w]
    return out


def detect_peaks_b(values, fs=SR):
    """Slope-sum onset detector with an adaptive threshold.

    The threshold is 0.6 x the mean of the last five slope-sum peaks (seeded
    from the first 3 s); each crossing is refined to the maximum of the raw
    signal within the following 0.3 s, which must be an interior local maximum.
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 3 or np.ptp(x) == 0:
        return np.zeros(0, dtype=np.int64)
    ssf = slope_sum(x, fs)
    init = ssf[: max(1, int(3 * fs))]
    if init.max() <= 0:
        return np.zeros(0, dtype=np.int64)
    recent = deque([init.max()], maxlen=5)
    refractory = int(round(0.3 * fs))
    search = int(round(0.3 * fs))
    peaks = []
    i, armed = 1, ssf[0] <= 0.6 * init.max()
    while i < n:
        thr = 0.6 * float(np.mean(recent))
        if not armed:
            armed = ssf[i] < thr
            i += 1
            continue
        if ssf[i] <= thr:
            i += 1
            continue
        hi = min(n, i + search)
        ssf_peak = i + int(np.argmax(ssf[i:hi]))
        recent.append(float(ssf[ssf_peak]))
        p = i + int(np.argmax(x[i:hi]))
        if 0 < p < n - 1 and x[p] >= x[p - 1] and x[p] >= x[p + 1]:
            if not peaks or p - peaks[-1] >= refractory:
                peaks.append(p)
        armed = False
        i = max(i + 1, p + 1)
    return np.asarray(peaks, dtype=np.int64)


def peak_agreement_f1(peaks_a, peaks_b, fs=SR, tolerance_s=COINCIDENCE_S) -> float:
    """Greedy earliest-first one-to-one matching; coincident if strictly closer than the tolerance."""
    a = np.asarray(peaks_a, dtype=np.float64) / fs
    b = np.asarray(peaks_b, dtype=np.float64) / fs
    if a.size == 0 and b.size == 0:
        return 1.0
    i = j = matches = 0
    while i < a.size and j < b.size:
        d = a[i] - b[j]
        if abs(d) < tolerance_s:
            matches += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return 2.0 * matches / (a.size + b.size)


def score_values(values, fs=SR, threshold=THRESHOLD, flat_delta=FLAT_DELTA) -> SqiReport:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise EmptyWindow("cannot score an empty window")
    k = flatline_fraction(x, delta=flat_delta)
    pa, pb = detect_peaks_a(x, fs), detect_peaks_b(x, fs)
    f1 = peak_agreement_f1(pa, pb, fs)
    sqi = k * f1
    return SqiReport(k, f1, sqi, pa, pb, bool(sqi >= threshold))


def score(window, threshold=THRESHOLD, flat_delta=FLAT_DELTA) -> SqiReport:
    return score_values(window.values, SR, threshold, flat_delta)
