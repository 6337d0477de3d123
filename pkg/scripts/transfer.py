"""Pretrain on synthetic family A, then fine-tune on family B and compare with training from scratch."""
import argparse

import numpy as np

from rrwave import evaluation as E
from rrwave.model import Model, ModelConfig
from rrwave.signal_io import resample, slide_windows, synthetic_cohort
from rrwave.sqi import score
from rrwave.train import TrainConfig, finetune, fit

from loso import parse_filters


def windows(records, stride):
    return [w for r in records for w in slide_windows(resample(r, 50), 16, stride) if score(w).accepted]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--filters")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--pretrain-epochs", type=int, default=20)
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--stride", type=float, default=4.0)
    args = p.parse_args()

    cfg = ModelConfig(w=16, residual_filters=parse_filters(args.filters))
    fam_a = windows(synthetic_cohort(6, seed=100, duration_s=args.duration), args.stride)
    fam_b = synthetic_cohort(4, seed=200, duration_s=args.duration, hr_range=(85.0, 115.0), rr_range=(10.0, 25.0),
                             noise_range=(0.02, 0.05))
    b_train, b_val, b_test = windows(fam_b[:2], args.stride), windows(fam_b[2:3], args.stride), windows(fam_b[3:], args.stride)
    n_a = int(0.8 * len(fam_a))
    pre = fit(Model.build(cfg, seed=0), fam_a[:n_a], fam_a[n_a:],
              TrainConfig(max_epochs=args.pretrain_epochs), source_tag="A")
    xt, yt = np.stack([w.values for w in b_test]), np.array([w.label_bpm for w in b_test])
    rows = []
    for s in range(args.seeds):
        tcfg = TrainConfig(max_epochs=args.finetune_epochs, seed=s)
        _, tuned = finetune(pre.best_checkpoint, b_train, b_val, tcfg, source_tag="B")
        scratch = Model.build(cfg, seed=s)
        fit(scratch, b_train, b_val, tcfg)
        rows.append((s, E.mae(tuned.predict(xt), yt), E.mae(scratch.predict(xt), yt)))
        print(f"seed {s}: transfer {rows[-1][1]:.3f}  scratch {rows[-1][2]:.3f}", flush=True)
    arr = np.array([r[1:] for r in rows])
    print(f"mean: transfer {arr[:, 0].mean():.3f} +/- {arr[:, 0].std(ddof=1):.3f}, "
          f"scratch {arr[:, 1].mean():.3f} +/- {arr[:, 1].std(ddof=1):.3f}")


if __name__ == "__main__":
    main()
