"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  Criteria 4 and 5 need many
hours of CPU training; they run for real when ``RRWAVE_FULL_ACCEPTANCE=1`` or
when the measured per-window cost projects them inside the budget, and
otherwise fail with the projection.
"""
import math
import os
import time

import numpy as np
import pytest

import gradcheck
from conftest import TINY_FILTERS, clean_windows
from rrwave import evaluation as E
from rrwave import model as M
from rrwave import sqi
from rrwave.experiments import gated_cohort, loso_cost_bound, measure_step_cost
from rrwave.model import DEFAULT_FILTERS, Model, ModelConfig
from rrwave.signal_io import SyntheticSpec, WindowSample, resample, slide_windows, synthesize, synthetic_cohort
from rrwave.train import EpochMonitor, OptimizerState, TrainConfig, adabelief_step, finetune, fit

pytestmark = pytest.mark.acceptance

FULL = os.environ.get("RRWAVE_FULL_ACCEPTANCE") == "1"
BUDGET_S = 7200.0
JOBS = int(os.environ.get("RRWAVE_JOBS", os.cpu_count() or 1))


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def all_of(checks):
    failed = [name for name, ok in checks if not ok]
    return not failed, failed


# ---------------------------------------------------------------- 1


def test_c01_gradients(verdict):
    t0 = time.perf_counter()
    worst = {name: gradcheck.worst_error(name, trials=100, seed=2024) for name in sorted(gradcheck.PRIMITIVES)}
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 120
    verdict(1, ok, f"{len(worst)} primitives x 100 trials, worst rel err {err:.2e} ({name}), {elapsed:.1f} s")


# ---------------------------------------------------------------- 2


def test_c02_shapes(verdict):
    problems = []
    for w in (16, 32, 64):
        audit = []
        Model.build(ModelConfig(w=w), seed=0).forward(np.zeros((1, 50 * w, 1)), audit=audit)
        got = dict(audit)
        want = {"front": (1, 10 * w, 3), "gap": (1, 3843), "fc0": (1, 128), "fc1": (1, 64), "fc2": (1, 1)}
        want.update({f"block{i}": (1, 10 * w, 3 + 2 * sum(DEFAULT_FILTERS[: i + 1])) for i in range(8)})
        problems += [f"W={w} {k}: {got.get(k)} != {v}" for k, v in want.items() if got.get(k) != v]
    verdict(2, not problems, "W=16/32/64 audit matches" if not problems else "; ".join(problems))


# ---------------------------------------------------------------- 3


def test_c03_overfit_capacity(verdict):
    windows = clean_windows(32, seed=0)
    model = Model.build(ModelConfig(w=16), seed=0)
    # constant lr: the scheduler is switched off for a pure capacity check
    cfg = TrainConfig(lr=1e-4, max_epochs=500, batch_size=4, early_stop_patience=10**6, plateau_patience=10**6)
    t0 = time.perf_counter()
    state = {}

    def stop(rec):
        state["rec"], state["t"] = rec, time.perf_counter() - t0
        return rec.val_mse < 0.5 or state["t"] > 600

    fit(model, windows, windows, cfg, callback=stop)
    rec, elapsed = state["rec"], state["t"]
    ok = rec.val_mse < 0.5 and rec.epoch <= 500 and elapsed < 600
    verdict(3, ok, f"training-set MSE {rec.val_mse:.3f} BPM^2 at epoch {rec.epoch} "
                   f"(running batch MSE {rec.train_mse:.3f}), {elapsed:.0f} s")


# ---------------------------------------------------------------- 4 and 5


@pytest.fixture(scope="module")
def cohort():
    return gated_cohort(8, seed=0, w=16, per_subject=200)


@pytest.fixture(scope="module")
def projection():
    t_train, t_infer = measure_step_cost(ModelConfig(w=16))
    bound = loso_cost_bound(8, 200, t_train, t_infer) / JOBS
    return t_train, t_infer, bound


def test_c04_generalization(verdict, cohort, projection):
    t_train, t_infer, bound = projection
    if not FULL and bound > BUDGET_S:
        verdict(4, False, f"not run: measured {t_train:.3f} s/window train, {t_infer:.3f} s/window infer on "
                          f"{JOBS} core(s); 40 fits x >= 6 epochs need >= {bound / 3600:.1f} h > 2 h")
    t0 = time.perf_counter()
    net = E.run_loso(cohort, ModelConfig(w=16), TrainConfig(), seed=0, jobs=JOBS)
    elapsed = time.perf_counter() - t0
    base = E.run_loso(cohort, ModelConfig(w=16), seed=0, fit_fn=E.mean_baseline_fit)
    ok = net.mean_mae < 3.0 and net.mean_mae < base.mean_mae and elapsed < BUDGET_S
    verdict(4, ok, f"MAE {net.mean_mae:.3f} +/- {net.std_mae:.3f} vs baseline {base.mean_mae:.3f}, "
                   f"{elapsed / 3600:.2f} h")


def test_c05_ablation(verdict, cohort, projection):
    t_train, t_infer, bound = projection
    total = 6 * bound
    if not FULL and total > BUDGET_S:
        verdict(5, False, f"not run: 6 LOSO runs (3 seeds x 2 arms) project to >= {total / 3600:.1f} h")
    rows = []
    for plain in (False, True):
        maes = [E.run_loso(cohort, ModelConfig(w=16, plain=plain), TrainConfig(), seed=s, jobs=JOBS).mean_mae
                for s in range(3)]
        rows.append(("RRWaveNet-Plain" if plain else "RRWaveNet", maes))
    table = " | ".join(f"{name}: {np.mean(m):.3f} ({', '.join(f'{v:.3f}' for v in m)})" for name, m in rows)
    full, plain = np.mean(rows[0][1]), np.mean(rows[1][1])
    order = "full < plain" if full < plain else "full >= plain"
    verdict(5, full <= plain + 0.3, f"{table}; {order}")


# ---------------------------------------------------------------- 6


def k_signal():
    x = np.zeros(800)
    x[1::2] = 0.05  # zigzag, every step 0.05
    x[300:400] = 7.0
    x[400:] += 1.0
    return x


def test_c06_sqi(verdict):
    clean = slide_windows(resample(synthesize(SyntheticSpec(duration_s=16, seed=1, fs=50)), 50), 16)[0]
    rng = np.random.default_rng(0)
    corrupt = clean.values.copy()
    corrupt[rng.integers(0, 480):][:320] = corrupt[0]
    corrupt_w = WindowSample("x", 0.0, 16, corrupt[:800], clean.label_bpm)
    checks = [
        ("constant -> 0", sqi.score(WindowSample("c", 0.0, 16, np.full(800, 0.4), 15.0)).sqi == 0.0),
        ("clean >= 0.9", sqi.score(clean).sqi >= 0.9),
        ("40% flatline rejected", not sqi.score(corrupt_w).accepted),
        ("K = 0.875", sqi.flatline_fraction(k_signal()) == 0.875),
        ("F1 identical = 1", sqi.peak_agreement_f1([10, 60, 110], [10, 60, 110]) == 1.0),
        ("F1 {100} vs {} = 0", sqi.peak_agreement_f1([100], []) == 0.0),
        ("F1 hand = 0.4", sqi.peak_agreement_f1([100, 200, 300], [103, 290], fs=50) == 0.4),
    ]
    ok, failed = all_of(checks)
    verdict(6, ok, f"{len(checks)} oracle checks" + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 7


def test_c07_adabelief(verdict):
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-13

    def grad(th, t):
        return 2.0 * (th - 3.0) + math.cos(0.7 * t)

    theta, m, s, ref = 0.25, 0.0, 0.0, []
    for t in range(1, 11):
        g = grad(theta, t)
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * (g - m) ** 2 + eps
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(s / (1 - b2 ** t)) + eps)
        ref.append(theta)
    p, state, ours = {"x": np.array([0.25])}, OptimizerState(), []
    for t in range(1, 11):
        adabelief_step(p, {"x": np.array([grad(p["x"][0], t)])}, state, lr, (b1, b2), eps)
        ours.append(p["x"][0])
    err = max(abs(a - b) for a, b in zip(ours, ref))
    verdict(7, err < 1e-12, f"10-step max deviation {err:.1e}")


# ---------------------------------------------------------------- 8


def test_c08_scheduler(verdict):
    mon, lr, decays, stop_at = EpochMonitor(), 1e-4, [], None
    for epoch in range(1, 30):
        _, lr, d, stop = mon.update(epoch, 2.0, lr)
        decays += [epoch] if d else []
        if stop:
            stop_at = epoch
            break
    mon2, lr2, decays2 = EpochMonitor(), 1e-4, []
    for epoch in range(1, 60):
        _, lr2, d, _ = mon2.update(epoch, 100.0 / epoch, lr2)
        decays2 += [epoch] if d else []
    # the same events through the real training loop: lr 0 and frozen statistics keep val loss constant
    cfg = ModelConfig(w=16, residual_filters=TINY_FILTERS, bn_momentum=0.0)
    wins = clean_windows(4, seed=9)
    res = fit(Model.build(cfg), wins[:2], wins[2:], TrainConfig(lr=0.0, batch_size=2, max_epochs=100))
    checks = [
        ("monitor stop at best+5", stop_at == 6),
        ("monitor one decay at best+4", decays == [5] and lr == 1e-4 * 0.25),
        ("decreasing never decays", decays2 == [] and lr2 == 1e-4),
        ("fit stop at best+5", res.best_epoch == 1 and res.stop_epoch == 6),
        ("fit one decay at best+4", res.decay_epochs == [5]),
    ]
    ok, failed = all_of(checks)
    verdict(8, ok, f"{len(checks)} event checks" + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 9


def test_c09_snr(verdict):
    t = np.arange(800) / 50.0
    tone = np.sin(2 * np.pi * 1.25 * t)
    sigma = math.sqrt(0.5 / 10.0)
    vals, parseval, scale = [], 0.0, 0.0
    for s in range(50):
        x = tone + np.random.default_rng(s).normal(0, sigma, 800)
        vals.append(E.snr_db(x))
        p_sig, p_noise, p_total = E.snr_components(x)
        parseval = max(parseval, abs(p_sig + p_noise - p_total) / p_total)
        scale = max(scale, abs(E.snr_db(x) - E.snr_db(37.5 * x)))
    mean = float(np.mean(vals))
    ok = abs(mean - 10.0) <= 1.0 and parseval < 1e-6 and scale <= 1e-9
    verdict(9, ok, f"mean SNR {mean:.3f} dB (analytic 10), Parseval residual {parseval:.1e}, "
                   f"scaling deviation {scale:.1e}")


# ---------------------------------------------------------------- 10


def test_c10_mae_ews(verdict):
    rep = E.ews_report([15, 15, 15, 10, 10, 22, 26, 7], [16, 10, 15, 10, 15, 23, 22, 30])
    perfect = E.ews_report([5, 10, 15, 22, 30], [5, 10, 15, 22, 30])
    degenerate = E.ews_report([15] * 4, [26] * 4)
    checks = [
        ("mae identity", E.mae([12, 14], [12, 14]) == 0.0),
        ("mae hand", E.mae([12, 17], [10, 20]) == 2.5),
        ("mae count mode", E.mae([1] * 8 + [0, 0], [0] * 10, mode="count", w=16) == 3.0),
        ("ews 15/26/8/9", [E.ews_score(v) for v in (15, 26, 8, 9)] == [0, 3, 3, 1]),
        ("confusion", rep.confusion.tolist() == [[2, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 1, 1]]),
        ("macro-F1 0.625", abs(rep.f1_macro - 0.625) < 1e-15),
        ("FNR 0.2", abs(rep.fnr - 0.2) < 1e-15),
        ("FPR 1/3", abs(rep.fpr - 1 / 3) < 1e-15),
        ("perfect", perfect.f1_macro == 1.0 and perfect.fnr == 0.0 and perfect.fpr == 0.0),
        ("degenerate", degenerate.fpr == 1.0 and degenerate.fnr == 0.0),
    ]
    ok, failed = all_of(checks)
    verdict(10, ok, f"{len(checks)} hand oracles" + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 11


def test_c11_determinism(verdict, tmp_path):
    cfg = ModelConfig(w=16, residual_filters=TINY_FILTERS)
    wins = clean_windows(12, seed=4)
    tcfg = TrainConfig(lr=1e-3, max_epochs=3, batch_size=4, seed=5)
    a = fit(Model.build(cfg, seed=1), wins[:8], wins[8:], tcfg)
    b = fit(Model.build(cfg, seed=1), wins[:8], wins[8:], tcfg)
    data = {f"s{i}": wins[2 * i:2 * i + 2] for i in range(6)}
    tl = TrainConfig(lr=1e-3, max_epochs=2, batch_size=4)
    r1, r2 = E.run_loso(data, cfg, tl, seed=2), E.run_loso(data, cfg, tl, seed=2)
    full = Model.build(ModelConfig(w=16), seed=0)
    x = np.random.default_rng(0).normal(size=(4, 800))
    before = full.predict(x, dtype=np.float32)
    after = M.load(M.save(full, tmp_path / "m.rrwn")).predict(x, dtype=np.float32)
    checks = [
        ("history", a.history == b.history),
        ("checkpoint bytes", a.best_checkpoint.to_bytes() == b.best_checkpoint.to_bytes()),
        ("report", r1.to_dict() == r2.to_dict() and r1.predictions == r2.predictions),
        ("round trip 32-bit", before.tobytes() == after.tobytes()),
    ]
    ok, failed = all_of(checks)
    verdict(11, ok, f"{len(checks)} bit-identity checks" + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 12


def family_windows(records, w=16):
    out = []
    for rec in records:
        out += [win for win in slide_windows(resample(rec, 50), w, stride=8.0) if sqi.score(win).accepted]
    return out


def test_c12_transfer(verdict):
    fam_a = family_windows(synthetic_cohort(5, seed=100, duration_s=80))
    fam_b_recs = synthetic_cohort(4, seed=200, duration_s=80, hr_range=(85.0, 115.0), rr_range=(10.0, 25.0),
                                  noise_range=(0.02, 0.05))
    b_fit = family_windows(fam_b_recs[:3])
    b_test = family_windows(fam_b_recs[3:])
    rng = np.random.default_rng(0)
    order = rng.permutation(len(b_fit))
    b_train, b_val = [b_fit[i] for i in order[:16]], [b_fit[i] for i in order[16:24]]
    a = [fam_a[i] for i in rng.permutation(len(fam_a))[:40]]
    cfg = ModelConfig(w=16)
    pre = fit(Model.build(cfg, seed=0), a[:32], a[32:], TrainConfig(max_epochs=3, batch_size=8), source_tag="A")
    xt = np.stack([w.values for w in b_test])
    yt = np.array([w.label_bpm for w in b_test])
    arms = {"transfer": [], "scratch": []}
    finite, tracked = True, True
    for s in range(5):
        tcfg = TrainConfig(max_epochs=2, batch_size=8, seed=s)
        res, model = finetune(pre.best_checkpoint, b_train, b_val, tcfg, source_tag="B")
        scratch = Model.build(cfg, seed=s)
        res_s = fit(scratch, b_train, b_val, tcfg, source_tag="B")
        for r in (res, res_s):
            finite &= math.isfinite(r.history[0].val_mse)
            tracked &= r.best_val_loss == min(h.val_mse for h in r.history)
        arms["transfer"].append(E.mae(model.predict(xt), yt))
        arms["scratch"].append(E.mae(scratch.predict(xt), yt))
    table = " | ".join(f"{k}: {np.mean(v):.3f} +/- {np.std(v, ddof=1):.3f}" for k, v in arms.items())
    verdict(12, finite and tracked, f"B test MAE over 5 seeds, {table}; first-epoch losses finite: {finite}")
