"""Desk-scale experiments: single-voxel filter comparison and memory sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import FilterSettings, PipelineConfig
from .fusion import fuse_frame, fuse_kalman, fuse_simple, fuse_weighted
from .grid import PoolExhausted, create_grid
from .pipeline import build_scene, build_trajectory
from .synthetic import render_synthetic_depth

FILTERS = ("simple", "weighted", "kalman")


# -- filters -----------------------------------------------------------------

def noise_sequences(settings: FilterSettings, seed):
    """Measurements (trials, steps) of a constant signal and the per-step sigma."""
    s = settings
    ramp = np.linspace(1.0, s.ramp, s.steps) if s.steps > 1 else np.ones(1)
    sigma = s.sigma_start * ramp
    rng = np.random.default_rng(seed)
    meas = s.truth + rng.standard_normal((s.trials, s.steps)) * sigma
    return meas, sigma


def matched_parameters(w, p0):
    """Weighted-mode cap and Kalman process variance giving the same steady gain ``w``.

    A saturated weight ``W`` blending unit-weight measurements has gain
    ``1 / (W + 1)``; a Kalman filter with measurement variance ``p0`` settles
    at gain ``w`` when ``Q = p0 w^2 / (1 - w)``.
    """
    return 1.0 / w - 1.0, p0 * w * w / (1.0 - w)


def run_filters(meas, variances, simple_w, w_max, q):
    """Estimates of all three filters after every step, each of shape (trials, steps).

    ``simple_w`` is a scalar or a per-step array; measurements enter the
    weighted filter with unit weight and the Kalman filter with ``variances``.
    """
    trials, steps = meas.shape
    simple_w = np.broadcast_to(np.asarray(simple_w, dtype=np.float64), (steps,))
    var = np.broadcast_to(np.asarray(variances, dtype=np.float64), (steps,))
    est = {k: np.empty((trials, steps)) for k in FILTERS}
    ts = np.full(trials, np.nan)
    tw, ww = np.full(trials, np.nan), np.zeros(trials)
    tk, pk = np.full(trials, np.nan), np.zeros(trials)
    inf = np.inf
    for k in range(steps):
        x = meas[:, k]
        ts = fuse_simple(ts, x, simple_w[k], inf)
        tw, ww = fuse_weighted(tw, ww, x, 1.0, w_max, inf)
        tk, pk = fuse_kalman(tk, pk, x, var[k], q, inf)
        est["simple"][:, k], est["weighted"][:, k], est["kalman"][:, k] = ts, tw, tk
    return est


@dataclass
class FilterResult:
    sigma: np.ndarray
    sq_error: dict  # filter -> (trials, steps)
    tail_error: dict  # filter -> (trials,)
    win_rate: dict = field(default_factory=dict)

    def trace(self, name):
        return self.sq_error[name].mean(axis=0)


def experiment_filters(settings: FilterSettings, seed=0) -> FilterResult:
    """Simple vs weighted vs Kalman on one voxel observed with growing noise."""
    meas, sigma = noise_sequences(settings, seed)
    w_max, q = matched_parameters(settings.w, sigma[0] ** 2)
    est = run_filters(meas, sigma ** 2, settings.w, w_max, q)
    sq = {k: (v - settings.truth) ** 2 for k, v in est.items()}
    tail = max(1, min(settings.tail, settings.steps))
    tail_err = {k: v[:, -tail:].mean(axis=1) for k, v in sq.items()}
    res = FilterResult(sigma, sq, tail_err)
    for other in ("simple", "weighted"):
        res.win_rate[f"kalman_vs_{other}"] = float(np.mean(tail_err["kalman"] <= tail_err[other]))
    return res


def write_filter_results(res: FilterResult, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "filters.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "sigma"] + [f"sq_err_{k}" for k in FILTERS])
        traces = [res.trace(k) for k in FILTERS]
        for i, s in enumerate(res.sigma):
            w.writerow([i, f"{s:.9g}"] + [f"{t[i]:.9g}" for t in traces])
    with open(directory / "filters_summary.txt", "w") as f:
        for k in FILTERS:
            f.write(f"tail_error_{k} = {res.tail_error[k].mean():.9g}\n")
        for k, v in res.win_rate.items():
            f.write(f"win_rate_{k} = {v:.9g}\n")
    return path


# -- memory ------------------------------------------------------------------

MEMORY_HEADER = ("N", "M", "resolution", "status", "blocks", "memory_bytes", "formula_bytes",
                 "offset_bytes", "payload_bytes", "covered_area_m2", "exceeds_threshold")


def experiment_memory(cfg: PipelineConfig, sweep=None, frames=None):
    """Fuse the configured scene with ground-truth poses for each (N, M) and report memory.

    Pool exhaustion is recorded as a row with ``status = pool_exhausted``
    and the counts reached at that point.
    """
    sweep = cfg.memory_sweep if sweep is None else sweep
    scene = build_scene(cfg)
    poses = build_trajectory(cfg)[:frames]
    depth = [render_synthetic_depth(scene, p, cfg.camera, cfg.input.noise_sigma0,
                                    np.random.default_rng([cfg.seed, k]))
             for k, p in enumerate(poses)]
    rows = []
    for n, m in sweep:
        sub = cfg.with_grid(n, m)
        # the sweep measures demand, so the pool may grow to the whole lattice
        cap = n ** 3 if cfg.pool_capacity is None else min(cfg.pool_capacity, n ** 3)
        grid = create_grid(sub.grid, cap, cfg.precision)
        status = "ok"
        try:
            for k, (frame, pose) in enumerate(zip(depth, poses)):
                fuse_frame(grid, frame, pose, cfg.fusion, frame_index=k)
        except PoolExhausted:
            status = "pool_exhausted"
        blocks = grid.allocated_count
        mem = grid.memory_bytes()
        rows.append({
            "N": n, "M": m, "resolution": n * m, "status": status, "blocks": blocks,
            "memory_bytes": mem, "formula_bytes": 2 * blocks * m ** 3 + 4 * n ** 3,
            "offset_bytes": 4 * n ** 3, "payload_bytes": 2 * blocks * m ** 3,
            "covered_area_m2": blocks * sub.grid.block_side ** 2,
            "exceeds_threshold": int(mem > cfg.memory_threshold)})
    return rows


def write_memory_results(rows, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "memory.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MEMORY_HEADER)
        for r in rows:
            w.writerow([f"{r[c]:.9g}" if isinstance(r[c], float) else r[c] for c in MEMORY_HEADER])
    return path

