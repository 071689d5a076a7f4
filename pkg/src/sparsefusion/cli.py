"""Command line entry point.

    sparsefusion run --config run.ini [--frames K] [--tracking MODE]
    sparsefusion experiment filters --config run.ini
    sparsefusion experiment memory --config run.ini [--sweep 8x8,16x8]
    sparsefusion render --grid grid.stsg --pose "r00 ... tz" [--config run.ini]

Exit codes: 0 ok, 1 configuration or I/O error, 2 tracking lost, 3 pool exhausted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import default_config, load_config, parse_sweep
from .io import FormatError, pose_from_row, read_grid_snapshot, write_pfm

EXIT_OK, EXIT_ERROR, EXIT_TRACKING_LOST, EXIT_POOL_EXHAUSTED = 0, 1, 2, 3

log = logging.getLogger("sparsefusion")


def _parser():
    p = argparse.ArgumentParser(prog="sparsefusion", description="Sparse TSDF depth-map fusion")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="reconstruct a frame sequence")
    r.add_argument("--config", required=True)
    r.add_argument("--frames", type=int)
    r.add_argument("--tracking", choices=("icp", "ground_truth", "icp_with_hook"))
    r.add_argument("--output", help="override run.output_dir")

    e = sub.add_parser("experiment", help="desk-scale experiments")
    esub = e.add_subparsers(dest="experiment", required=True)
    ef = esub.add_parser("filters", help="simple vs weighted vs Kalman on one voxel")
    ef.add_argument("--config", required=True)
    ef.add_argument("--output")
    em = esub.add_parser("memory", help="memory use over a sweep of (N, M)")
    em.add_argument("--config", required=True)
    em.add_argument("--sweep", help="comma-separated NxM pairs")
    em.add_argument("--frames", type=int)
    em.add_argument("--output")

    d = sub.add_parser("render", help="raycast a grid snapshot to a depth PFM")
    d.add_argument("--grid", required=True)
    d.add_argument("--pose", required=True,
                   help="12 numbers (row-major rotation then translation), optionally led by a frame index")
    d.add_argument("--config", help="camera settings; defaults apply otherwise")
    d.add_argument("--output", default="depth.pfm")
    return p


def _cmd_run(args):
    from .pipeline import STATUS_POOL_EXHAUSTED, STATUS_TRACKING_LOST, run

    cfg = load_config(args.config)
    if args.output:
        cfg = replace(cfg, output_dir=Path(args.output))
    out = run(cfg, frames=args.frames, tracking=args.tracking)
    for k, v in out.summary.items():
        print(f"{k} = {v}")
    if out.status == STATUS_TRACKING_LOST:
        return EXIT_TRACKING_LOST
    if out.status == STATUS_POOL_EXHAUSTED:
        return EXIT_POOL_EXHAUSTED
    return EXIT_OK


def _cmd_experiment(args):
    from .experiments import (experiment_filters, experiment_memory, write_filter_results,
                              write_memory_results)

    cfg = load_config(args.config)
    directory = Path(args.output) if args.output else cfg.output_dir
    if args.experiment == "filters":
        res = experiment_filters(cfg.filters, cfg.seed)
        path = write_filter_results(res, directory)
        for k, v in res.win_rate.items():
            print(f"win_rate_{k} = {v:.3f}")
    else:
        sweep = parse_sweep(args.sweep) if args.sweep else None
        rows = experiment_memory(cfg, sweep, args.frames)
        path = write_memory_results(rows, directory)
        for r in rows:
            print(f"N={r['N']} M={r['M']} blocks={r['blocks']} bytes={r['memory_bytes']} "
                  f"{r['status']}{' OVER THRESHOLD' if r['exceeds_threshold'] else ''}")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_render(args):
    from .render import raycast

    cfg = load_config(args.config) if args.config else default_config()
    grid = read_grid_snapshot(args.grid)
    _, pose = pose_from_row(args.pose.replace(",", " ").split())
    res = raycast(grid, pose, cfg.camera)
    write_pfm(args.output, res.frame.depth)
    hit = res.frame.valid
    print(f"{int(hit.sum())} of {hit.size} pixels hit; wrote {args.output}")
    if hit.any():
        print(f"depth range {np.min(res.frame.depth[hit]):.4f} .. {np.max(res.frame.depth[hit]):.4f}")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "experiment": _cmd_experiment, "render": _cmd_render}
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
