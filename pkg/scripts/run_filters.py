"""Single-voxel filter comparison: simple vs weighted vs Kalman under growing noise.

    python scripts/run_filters.py [--trials 30] [--steps 200] [--ramp 10] [--out out/filters]
"""

import argparse
from pathlib import Path

from sparsefusion.config import FilterSettings
from sparsefusion.experiments import FILTERS, experiment_filters, write_filter_results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--ramp", type=float, default=10.0, help="final sigma / initial sigma")
    p.add_argument("--w", type=float, default=0.1, help="fixed blend weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/filters")
    a = p.parse_args()

    settings = FilterSettings(trials=a.trials, steps=a.steps, ramp=a.ramp, w=a.w)
    res = experiment_filters(settings, a.seed)
    path = write_filter_results(res, Path(a.out))
    print(f"{'filter':<10} {'tail sq. error':>15}")
    for k in FILTERS:
        print(f"{k:<10} {res.tail_error[k].mean():>15.4e}")
    for k, v in res.win_rate.items():
        print(f"{k}: {v:.0%} of trials")
    print(f"per-step traces in {path}")


if __name__ == "__main__":
    main()
