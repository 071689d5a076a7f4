"""Memory use of the sparse grid over a sweep of block layouts.

    python scripts/run_memory.py --config scripts/configs/cluster.ini [--frames 10]
"""

import argparse
from pathlib import Path

from sparsefusion.config import load_config, parse_sweep
from sparsefusion.experiments import experiment_memory, write_memory_results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", help="comma-separated NxM pairs; default from the config")
    p.add_argument("--frames", type=int)
    p.add_argument("--out", default="out/memory")
    a = p.parse_args()

    cfg = load_config(a.config)
    rows = experiment_memory(cfg, parse_sweep(a.sweep) if a.sweep else None, a.frames)
    print(f"{'N':>4} {'M':>4} {'res':>5} {'blocks':>7} {'MiB':>9} {'offset %':>9}  status")
    for r in rows:
        share = 100.0 * r["offset_bytes"] / r["memory_bytes"]
        print(f"{r['N']:>4} {r['M']:>4} {r['resolution']:>5} {r['blocks']:>7} "
              f"{r['memory_bytes'] / 2 ** 20:>9.2f} {share:>9.1f}  {r['status']}")
    print(f"wrote {write_memory_results(rows, Path(a.out))}")


if __name__ == "__main__":
    main()
