"""Measure per-window training cost and project the full LOSO protocol's wall time."""
import argparse

from rrwave.experiments import loso_cost_bound, measure_step_cost
from rrwave.model import ModelConfig

from loso import parse_filters


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--filters")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--per-subject", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    for plain in (False, True):
        cfg = ModelConfig(w=16, residual_filters=parse_filters(args.filters), plain=plain)
        t_train, t_infer = measure_step_cost(cfg)
        bound = loso_cost_bound(args.subjects, args.per_subject, t_train, t_infer) / args.jobs
        print(f"{'plain' if plain else 'multiscale'}: {t_train * 1e3:.1f} ms/window train, "
              f"{t_infer * 1e3:.1f} ms/window infer, LOSO lower bound {bound / 3600:.2f} h")


if __name__ == "__main__":
    main()
