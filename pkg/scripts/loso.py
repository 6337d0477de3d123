"""LOSO x 5-fold on a gated synthetic cohort, against the cohort-mean baseline.

Example (reduced width, fits on one CPU core in about an hour)::

    python scripts/loso.py --filters 8,8,16,16,32,32,64,64 --per-subject 60 --max-epochs 40
"""
import argparse
import json
import logging
import time

from rrwave import evaluation as E
from rrwave.experiments import gated_cohort
from rrwave.model import DEFAULT_FILTERS, ModelConfig
from rrwave.train import TrainConfig


def parse_filters(text):
    return tuple(int(v) for v in text.split(",")) if text else DEFAULT_FILTERS


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--per-subject", type=int, default=200)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--filters", help="comma-separated residual widths (default: published widths)")
    p.add_argument("--plain", action="store_true")
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="loso_report.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cohort = gated_cohort(args.subjects, seed=0, w=args.window, per_subject=args.per_subject)
    mcfg = ModelConfig(w=args.window, residual_filters=parse_filters(args.filters), plain=args.plain)
    tcfg = TrainConfig(max_epochs=args.max_epochs, batch_size=args.batch_size)
    t0 = time.time()
    net = E.run_loso(cohort, mcfg, tcfg, seed=args.seed, jobs=args.jobs, dataset_tag="synthetic",
                     progress=lambda d, n: logging.info("fit %d/%d", d, n))
    elapsed = time.time() - t0
    base = E.run_loso(cohort, mcfg, seed=args.seed, fit_fn=E.mean_baseline_fit)
    out = {"network": net.to_dict(), "baseline": base.to_dict(), "elapsed_s": elapsed}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
    print(f"network MAE {net.mean_mae:.3f} +/- {net.std_mae:.3f} BPM, "
          f"baseline {base.mean_mae:.3f} +/- {base.std_mae:.3f} BPM, {elapsed / 60:.1f} min")


if __name__ == "__main__":
    main()
