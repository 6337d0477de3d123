"""Shared pieces of the experiment scripts: gated synthetic cohorts and cost projection."""
from __future__ import annotations

import time

import numpy as np

from . import signal_io as sio
from .errors import EmptySplit
from .sqi import score


def gated_cohort(n_subjects=8, seed=0, w=16, per_subject=200, stride=2.0, **cohort_kw):
    """``{subject: windows}`` with the first ``per_subject`` SQI-accepted windows of each subject."""
    out = {}
    for rec in sio.synthetic_cohort(n_subjects, seed=seed, **cohort_kw):
        kept = [win for win in sio.slide_windows(sio.resample(rec, sio.SR), w, stride) if score(win).accepted]
        if len(kept) < per_subject:
            raise EmptySplit(f"{rec.subject_id}: only {len(kept)} accepted windows, need {per_subject}")
        out[rec.subject_id] = kept[:per_subject]
    return out


def measure_step_cost(model_config, batch_size=32, seed=0, repeats=2):
    """Seconds per window for one training step and for inference on the given architecture."""
    from . import tensor as T
    from .model import Model
    from .train import OptimizerState, adabelief_step, mse_loss

    model = Model.build(model_config, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch_size, model_config.input_length, 1))
    y = rng.uniform(8, 30, size=(batch_size, 1))
    state = OptimizerState()
    names = list(model.params)
    train_times, infer_times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.zero_grad()
        loss = mse_loss(model.forward(x, training=True), y)
        T.backward(loss)
        adabelief_step({n: model.params[n].data for n in names}, {n: model.params[n].grad for n in names},
                       state, 1e-4)
        model.invalidate_cache()
        train_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        model.predict(x[..., 0])
        infer_times.append(time.perf_counter() - t0)
    return min(train_times) / batch_size, min(infer_times) / batch_size


def loso_cost_bound(n_subjects, per_subject, t_train, t_infer, n_folds=5, min_epochs=6):
    """Lower bound on LOSO wall time in seconds for one worker.

    Every fit runs at least ``min_epochs`` epochs (early stopping cannot fire
    sooner).  Summed over the inner folds, each held-out subject trains on
    ``(n_folds - 1)(n - 1)`` subject-sets and validates on ``n - 1``.
    """
    rest = n_subjects - 1
    per_epoch = per_subject * ((n_folds - 1) * rest * t_train + rest * t_infer)
    test = n_folds * per_subject * t_infer
    return n_subjects * (min_epochs * per_epoch + test)
