"""Multi-scale front end vs the plain single-conv stem, several seeds per arm."""
import argparse
import logging

import numpy as np

from rrwave import evaluation as E
from rrwave.experiments import gated_cohort
from rrwave.model import ModelConfig
from rrwave.train import TrainConfig

from loso import parse_filters


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--per-subject", type=int, default=200)
    p.add_argument("--filters")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="ablation.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cohort = gated_cohort(args.subjects, seed=0, w=16, per_subject=args.per_subject)
    rows = []
    for plain in (False, True):
        cfg = ModelConfig(w=16, residual_filters=parse_filters(args.filters), plain=plain)
        for seed in range(args.seeds):
            rep = E.run_loso(cohort, cfg, TrainConfig(max_epochs=args.max_epochs), seed=seed, jobs=args.jobs)
            rows.append(("plain" if plain else "multiscale", seed, rep.mean_mae, rep.std_mae))
            logging.info("%s seed %d: %.3f", rows[-1][0], seed, rep.mean_mae)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("arm,seed,mean_mae_bpm,std_mae_bpm\n")
        fh.writelines(f"{a},{s},{m!r},{d!r}\n" for a, s, m, d in rows)
    print(f"{'arm':<12}{'mean MAE':>10}{'seeds':>8}")
    for arm in ("multiscale", "plain"):
        maes = [m for a, _, m, _ in rows if a == arm]
        print(f"{arm:<12}{np.mean(maes):>10.3f}{len(maes):>8}")


if __name__ == "__main__":
    main()
