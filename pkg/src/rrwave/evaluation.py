"""Evaluation protocol: MAE, leave-one-subject-out x 5-fold, SNR and EWS scoring."""
from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (Empty, EmptyWindow, InvalidRubric, LengthMismatch, RRWaveError, TooFewSubjects,
                     ValidationError)
from .signal_io import SR

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
N_FOLDS = 5
SNR_CLAMP = (-40.0, 60.0)


# ---------------------------------------------------------------- MAE


def mae(preds, truths, mode="bpm", w=None) -> float:
    """Mean absolute error in breaths per minute.

    ``mode="count"`` treats values as per-window breath counts and scales the
    summed error by ``60 / (n * w)``.
    """
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise Empty("MAE of zero samples")
    err = np.abs(t - p).sum()
    if mode == "bpm":
        return float(err / p.size)
    if mode == "count":
        if not w:
            raise ValidationError("count-mode MAE needs the window length w")
        return float(60.0 * err / (p.size * w))
    raise ValidationError(f"unknown MAE mode {mode!r}")


# ---------------------------------------------------------------- splits


def loso_splits(subjects, seed=0, n_folds=N_FOLDS):
    """For each held-out subject, partition the rest into ``n_folds`` subject groups.

    Returns ``[(test_subject, [(train_ids, val_ids), ...]), ...]``.
    """
    subjects = list(subjects)
    if len(set(subjects)) != len(subjects):
        raise ValidationError("subject ids must be unique")
    if len(subjects) < n_folds + 1:
        raise TooFewSubjects(f"need at least {n_folds + 1} subjects, got {len(subjects)}")
    out = []
    for i, test in enumerate(subjects):
        rest = [s for s in subjects if s != test]
        rng = np.random.default_rng([seed, i])
        order = [rest[j] for j in rng.permutation(len(rest))]
        parts = [list(p) for p in np.array_split(np.array(order, dtype=object), n_folds)]
        folds = []
        for k in range(n_folds):
            val = parts[k]
            train = [s for j, p in enumerate(parts) if j != k for s in p]
            folds.append((train, val))
        out.append((test, folds))
    return out


# ---------------------------------------------------------------- reports


@dataclass
class SubjectResult:
    subject_id: str
    mae_bpm: float
    fold_maes: list
    n_windows: int


@dataclass
class EvalReport:
    subjects: list
    mean_mae: float
    std_mae: float
    metadata: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list)  # (subject, start_t, truth, pred) rows

    @classmethod
    def from_subjects(cls, rows, metadata=None, predictions=None):
        maes = np.array([r.mae_bpm for r in rows], dtype=np.float64)
        std = float(np.std(maes, ddof=1)) if len(maes) > 1 else 0.0
        return cls(list(rows), float(maes.mean()), std, dict(metadata or {}), list(predictions or []))

    def to_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "subjects": [dataclasses.asdict(r) for r in self.subjects],
            "aggregate": {"mean_mae_bpm": self.mean_mae, "std_mae_bpm": self.std_mae,
                          "std_kind": "sample", "n_subjects": len(self.subjects)},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValidationError(f"unsupported report schema {d.get('schema_version')!r}")
        rows = [SubjectResult(**r) for r in d["subjects"]]
        return cls(rows, d["aggregate"]["mean_mae_bpm"], d["aggregate"]["std_mae_bpm"], d.get("metadata", {}))


# ---------------------------------------------------------------- LOSO harness


class MeanPredictor:
    """Baseline that always predicts the training-label mean."""

    def __init__(self, value):
        self.value = float(value)

    def predict(self, values, dtype=np.float64, batch_size=None):
        return np.full(len(values), self.value, dtype=dtype)


def mean_baseline_fit(train, val, seed, model_config, train_config, pretrained):
    labels = np.concatenate([train[1], val[1]])
    return MeanPredictor(labels.mean())


def network_fit(train, val, seed, model_config, train_config, pretrained):
    """Default fold trainer: build (or load) the network and train it."""
    from .model import Model
    from .train import fit, finetune

    cfg = dataclasses.replace(train_config, seed=int(seed))
    if pretrained is not None:
        _, model = finetune(pretrained, train, val, cfg, expect_w=model_config.w)
    else:
        model = Model.build(model_config, seed=int(seed))
        fit(model, train, val, cfg)
    return model


def _group(dataset):
    """Normalize a dataset to ``{subject: (values[N, L], labels[N], start_t[N])}``."""
    groups = {}
    if isinstance(dataset, dict):
        for sid, item in dataset.items():
            if isinstance(item, tuple):
                values, labels = item[0], item[1]
                starts = item[2] if len(item) > 2 else np.arange(len(labels), dtype=np.float64)
            else:
                values = np.stack([w.values for w in item])
                labels = np.array([w.label_bpm for w in item])
                starts = np.array([w.start_t for w in item])
            groups[str(sid)] = (np.asarray(values, np.float64), np.asarray(labels, np.float64),
                                np.asarray(starts, np.float64))
        return groups
    by = {}
    for w in dataset:
        by.setdefault(w.subject_id, []).append(w)
    return _group(by)


def _fold_seed(seed, i, k):
    return int(np.random.SeedSequence([seed, i, k]).generate_state(1)[0])


def _run_fit(job):
    (i, k, test, train_ids, val_ids, seed, groups, fit_fn, model_config, train_config, pretrained) = job
    leak = set(train_ids + val_ids) & {test}
    if leak:
        raise RuntimeError(f"subject leakage: {leak}")
    train = tuple(np.concatenate([groups[s][j] for s in train_ids]) for j in (0, 1))
    val = tuple(np.concatenate([groups[s][j] for s in val_ids]) for j in (0, 1))
    try:
        predictor = fit_fn(train, val, _fold_seed(seed, i, k), model_config, train_config, pretrained)
    except RRWaveError as exc:
        exc.args = (f"[subject {test}, fold {k}] {exc}",)
        raise
    preds = np.asarray(predictor.predict(groups[test][0]), dtype=np.float64)
    return i, k, preds


def run_loso(dataset, model_config=None, train_config=None, pretrained=None, *, seed=0, jobs=1,
             fit_fn=None, n_folds=N_FOLDS, mae_mode="bpm", dataset_tag="", progress=None):
    """Leave-one-subject-out evaluation with ``n_folds`` inner folds per held-out subject.

    ``fit_fn(train, val, seed, model_config, train_config, pretrained)`` must
    return an object with ``predict(values)``; the default trains the network
    (or fine-tunes ``pretrained``).  Per-subject MAE is the mean of its fold
    models' test MAEs.
    """
    from .model import ModelConfig
    from .train import TrainConfig

    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    fit_fn = fit_fn or network_fit
    groups = _group(dataset)
    subjects = sorted(groups)
    splits = loso_splits(subjects, seed=seed, n_folds=n_folds)
    jobs_list = []
    for i, (test, folds) in enumerate(splits):
        for k, (train_ids, val_ids) in enumerate(folds):
            assert test not in train_ids and test not in val_ids
            jobs_list.append((i, k, test, train_ids, val_ids, seed, groups, fit_fn, model_config,
                              train_config, pretrained))
    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, k, preds in pool.map(_run_fit, jobs_list):
                results[i, k] = preds
                if progress:
                    progress(len(results), len(jobs_list))
    else:
        for job in jobs_list:
            i, k, preds = _run_fit(job)
            results[i, k] = preds
            if progress:
                progress(len(results), len(jobs_list))

    rows, predictions = [], []
    for i, (test, folds) in enumerate(splits):
        values, labels, starts = groups[test]
        fold_preds = [results[i, k] for k in range(len(folds))]
        w = model_config.w
        fold_maes = [mae(p, labels, mode=mae_mode, w=w) for p in fold_preds]
        rows.append(SubjectResult(test, float(np.mean(fold_maes)), fold_maes, int(len(labels))))
        mean_pred = np.mean(fold_preds, axis=0)
        predictions += [(test, float(t), float(y), float(p)) for t, y, p in zip(starts, labels, mean_pred)]
    meta = {
        "window_s": model_config.w, "dataset_tag": dataset_tag, "seed": seed, "n_folds": n_folds,
        "mae_mode": mae_mode, "plain": model_config.plain,
        "pretrained": (pretrained.meta if hasattr(pretrained, "meta") else
                       (str(pretrained) if pretrained is not None else None)),
        "fits": len(jobs_list),
    }
    return EvalReport.from_subjects(rows, meta, predictions)


# ---------------------------------------------------------------- SNR


def _spectrum_power(values):
    """Mean-removed one-sided power spectrum; sums to the mean-square of the signal."""
    x = np.asarray(values, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    spec = np.abs(np.fft.rfft(x)) ** 2 / (n * n)
    spec[1:] *= 2.0
    if n % 2 == 0:
        spec[-1] /= 2.0
    return x, spec


def snr_components(values, fs=SR, band=(0.5, 3.0)):
    """Return ``(p_signal, p_noise, p_total_time_domain)``.

    The fundamental is the strongest bin inside ``band``; signal power is the
    fundamental and first-harmonic bins with one guard bin on each side.
    """
    x, spec = _spectrum_power(values)
    n = x.size
    if n == 0:
        raise EmptyWindow("SNR of an empty window")
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    in_band = np.flatnonzero((freqs >= band[0]) & (freqs <= band[1]))
    if in_band.size == 0:
        raise EmptyWindow("window too short to resolve the pulse band")
    k0 = int(in_band[np.argmax(spec[in_band])])
    mask = np.zeros(spec.size, dtype=bool)
    for k in (k0, 2 * k0):
        mask[max(0, k - 1):min(spec.size, k + 2)] = True
    p_sig = float(spec[mask].sum())
    p_noise = float(spec[~mask].sum())
    return p_sig, p_noise, float(np.mean(x * x))


def snr_db(window, fs=SR) -> float:
    values = window.values if hasattr(window, "values") else window
    p_sig, p_noise, p_total = snr_components(values, fs)
    if p_total > 0 and abs(p_sig + p_noise - p_total) > 1e-6 * p_total:
        raise ArithmeticError("spectral power does not match time-domain power")
    lo, hi = SNR_CLAMP
    if p_sig <= 0:
        return lo
    if p_noise <= 0:
        return hi
    return float(np.clip(10.0 * math.log10(p_sig / p_noise), lo, hi))


@dataclass
class SnrSummary:
    rows: list  # (subject, start_t, snr_db)

    def quartiles(self):
        v = np.array([r[2] for r in self.rows], dtype=np.float64)
        if v.size == 0:
            return {}
        q = np.percentile(v, [0, 25, 50, 75, 100])
        return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)), n=int(v.size))


# ---------------------------------------------------------------- EWS


DEFAULT_RUBRIC = (
    {"max": 8, "score": 3},
    {"max": 11, "score": 1},
    {"max": 20, "score": 0},
    {"max": 24, "score": 2},
    {"max": None, "score": 3},
)


def validate_rubric(rubric):
    """A rubric is an ordered list of ``{"max": upper bound or None, "score": 0..3}``.

    Band j covers ``(max_{j-1}, max_j]`` with the first band starting at 0, so
    the last band must be unbounded for the table to cover every rate.
    """
    bands = list(rubric)
    if not bands:
        raise InvalidRubric("rubric has no bands")
    prev = -math.inf
    for j, b in enumerate(bands):
        if set(b) - {"max", "score"} or "score" not in b:
            raise InvalidRubric(f"band {j}: expected keys max, score")
        if int(b["score"]) not in (0, 1, 2, 3):
            raise InvalidRubric(f"band {j}: score {b['score']} outside 0..3")
        hi = b.get("max")
        if hi is None:
            if j != len(bands) - 1:
                raise InvalidRubric("only the last band may be unbounded")
            break
        if not hi > prev:
            raise InvalidRubric("band upper bounds must increase strictly")
        prev = hi
    if bands[-1].get("max") is not None:
        raise InvalidRubric("rubric does not cover rates above its last bound")
    return bands


def ews_score(rr_bpm, rubric=DEFAULT_RUBRIC) -> int:
    if rr_bpm < 0 or not math.isfinite(rr_bpm):
        raise ValidationError(f"respiratory rate must be finite and >= 0, got {rr_bpm}")
    for band in validate_rubric(rubric):
        hi = band["max"]
        if hi is None or rr_bpm <= hi:
            return int(band["score"])
    raise InvalidRubric("rate not covered")  # unreachable for validated rubrics


@dataclass
class EwsReport:
    confusion: np.ndarray   # [true score, predicted score]
    f1_macro: float
    fnr: float
    fpr: float
    rubric: list

    def to_dict(self):
        return {"confusion": self.confusion.tolist(), "f1_macro": self.f1_macro, "fnr": self.fnr,
                "fpr": self.fpr, "rubric": list(self.rubric)}


def ews_report(truth_bpm, pred_bpm, rubric=DEFAULT_RUBRIC) -> EwsReport:
    """Confusion matrix of true vs predicted scores plus macro-F1, FNR and FPR.

    Macro-F1 averages over scores present in either truth or prediction.
    FNR: share of truly abnormal (score > 0) samples scored 0.  FPR: share of
    truly normal samples scored > 0.  Negative predicted rates count as 0.
    """
    truth_bpm = np.asarray(truth_bpm, dtype=np.float64).reshape(-1)
    pred_bpm = np.maximum(np.asarray(pred_bpm, dtype=np.float64).reshape(-1), 0.0)
    if truth_bpm.size != pred_bpm.size:
        raise LengthMismatch(f"{truth_bpm.size} truths vs {pred_bpm.size} predictions")
    bands = validate_rubric(rubric)
    st = np.array([ews_score(v, bands) for v in truth_bpm], dtype=np.int64)
    sp = np.array([ews_score(v, bands) for v in pred_bpm], dtype=np.int64)
    cm = np.zeros((4, 4), dtype=np.int64)
    np.add.at(cm, (st, sp), 1)
    f1s = []
    for c in range(4):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        if tp + fp + fn == 0:
            continue
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
    f1 = float(np.mean(f1s)) if f1s else 1.0
    pos, neg = st > 0, st == 0
    fnr = float(np.mean(sp[pos] == 0)) if pos.any() else 0.0
    fpr = float(np.mean(sp[neg] > 0)) if neg.any() else 0.0
    return EwsReport(cm, f1, fnr, fpr, [dict(b) for b in bands])
