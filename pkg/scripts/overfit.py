"""Fit 32 clean synthetic windows with train = val and log the training-set MSE per epoch."""
import argparse
import time

import numpy as np

from rrwave.model import ModelConfig, Model
from rrwave.signal_io import SyntheticSpec, resample, slide_windows, synthesize
from rrwave.train import TrainConfig, fit


def clean_windows(n, seed, w=16):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = SyntheticSpec(duration_s=w, hr_bpm=float(rng.uniform(60, 100)), rr_bpm=float(rng.uniform(8, 30)),
                             riiv_depth=0.15, riav_depth=0.15, rifv_depth=0.05, seed=i, fs=50)
        out += slide_windows(resample(synthesize(spec, f"c{i:02d}"), 50), w)
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--windows", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--target", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    wins = clean_windows(args.windows, args.seed)
    model = Model.build(ModelConfig(w=16), seed=args.seed)
    cfg = TrainConfig(max_epochs=args.max_epochs, batch_size=args.batch_size, early_stop_patience=10**6,
                      plateau_patience=10**6)
    t0 = time.time()
    print("epoch,batch_mse,train_set_mse,seconds")

    def log(rec):
        print(f"{rec.epoch},{rec.train_mse:.4f},{rec.val_mse:.4f},{time.time() - t0:.0f}", flush=True)
        return rec.val_mse < args.target

    fit(model, wins, wins, cfg, callback=log)


if __name__ == "__main__":
    main()
