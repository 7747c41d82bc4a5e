"""Experiment runners: impact of K, NC versus NC+, and consecutive prediction.

Each study trains the needed models from a base :class:`TrainConfig` and
writes one CSV report.  The rows are also returned for programmatic use.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import Backbone
from .nbody import TrajectorySample, generate
from .rollout import RolloutConfig, consecutive_predict
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

STUDIES = ("impact_of_k", "nc_vs_ncplus", "consecutive")

REPORT_COLUMNS = {
    "impact_of_k": ["seed", "order", "test_mse", "test_mse_x100", "best_epoch", "seconds_per_epoch"],
    "nc_vs_ncplus": ["seed", "variant", "epoch", "valid_mse", "valid_vel_mse_interior"],
    "consecutive": ["seed", "variant", "window", "time", "position_mse", "truncated"],
}


def _with_rollout(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, rollout=replace(config.rollout, **changes), out_dir=None)


def _seconds_per_epoch(result: TrainResult) -> float:
    last = result.metrics[-1]
    return last["wall_clock_seconds"] / last["epoch"]


def impact_of_k(config: TrainConfig, splits, seeds: Sequence[int] = (0,), orders: Sequence[int] = range(6)) -> list[dict]:
    """Train NC(K) for every K in ``orders``; record test error and time per epoch."""
    rows = []
    for seed in seeds:
        for k in orders:
            res = train(replace(_with_rollout(config, order=k), seed=seed), splits=splits)
            rows.append({"seed": seed, "order": k, "test_mse": res.test_mse, "test_mse_x100": res.test_mse * 100,
                         "best_epoch": res.best_epoch, "seconds_per_epoch": _seconds_per_epoch(res)})
            log.info("impact_of_k seed=%d K=%d test=%.5g", seed, k, res.test_mse)
    return rows


def nc_vs_ncplus(config: TrainConfig, splits, seeds: Sequence[int] = (0,),
                 results: dict | None = None) -> list[dict]:
    """Intermediate-velocity error per evaluation epoch for NC(K) and NC+(K).

    ``results`` may supply already trained runs keyed by ``(variant, seed)``.
    """
    rows = []
    for seed in seeds:
        for variant, plus in (("nc", False), ("ncplus", True)):
            res = (results or {}).get((variant, seed))
            if res is None:
                res = train(replace(_with_rollout(config, use_velocity_reg=plus), seed=seed), splits=splits)
            for m in res.metrics:
                rows.append({"seed": seed, "variant": variant, "epoch": m["epoch"], "valid_mse": m["valid_mse"],
                             "valid_vel_mse_interior": m["valid_vel_mse_interior"]})
    return rows


def heldout_trajectories(seed: int, count: int, n: int, t_window: float, windows: int,
                         dt: float) -> list[TrajectorySample]:
    """Long trajectories with one frame per window end, for consecutive evaluation."""
    return generate(seed, count, n, t_window=t_window * windows, k=windows, dt=dt)


def consecutive_errors(model: Backbone, config: RolloutConfig, trajectories: Sequence[TrajectorySample],
                       windows: int) -> tuple[np.ndarray, bool]:
    """Mean position MSE at each window end, averaged over ``trajectories``.

    Windows after a diverged chain count as ``inf``.
    """
    if not trajectories:
        raise ValueError("no held-out trajectories")
    errors = np.zeros(windows)
    truncated = False
    for traj in trajectories:
        if traj.k != windows:
            raise ValueError(f"trajectory seed={traj.seed} has {traj.k} windows, expected {windows}")
        res = consecutive_predict(model, traj.initial, config, windows)
        truncated |= res.truncated
        by_time = {round(t / config.t_window, 9): s for t, s in zip(res.times, res.states)}
        for w in range(1, windows + 1):
            s = by_time.get(float(w))
            if s is None:
                errors[w - 1] = np.inf
            else:
                errors[w - 1] += float(np.mean((s.positions - traj.frames[w].x) ** 2))
    return errors / len(trajectories), truncated


def consecutive(config: TrainConfig, splits, seeds: Sequence[int] = (0,), windows: int = 10,
                trajectories: Sequence[TrajectorySample] | None = None, models: dict | None = None) -> list[dict]:
    """Chain NC+(2) and NC(0) over ``windows`` windows on held-out trajectories."""
    if trajectories is None:
        first = splits[0][0]
        trajectories = heldout_trajectories(10**6, 50, first.n, first.t_window, windows, first.dt)
    rows = []
    variants = (("ncplus2", dict(order=2, use_velocity_reg=True)), ("nc0", dict(order=0, use_velocity_reg=False)))
    for seed in seeds:
        for name, changes in variants:
            entry = (models or {}).get((name, seed))
            if entry is None:
                res = train(replace(_with_rollout(config, **changes), seed=seed), splits=splits)
                entry = (res.model, res.rollout_config)
            model, rc = entry
            errs, truncated = consecutive_errors(model, rc, trajectories, windows)
            for w, e in enumerate(errs, start=1):
                rows.append({"seed": seed, "variant": name, "window": w, "time": w * rc.t_window,
                             "position_mse": float(e), "truncated": truncated})
    return rows


def write_report(rows: Sequence[dict], kind: str, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS[kind])
        writer.writeheader()
        writer.writerows(rows)


def run_study(kind: str, config: TrainConfig, splits, seeds: Sequence[int] = (0,), out_path=None, **kwargs) -> list[dict]:
    if kind not in STUDIES:
        raise ValueError(f"unknown study {kind!r}; expected one of {STUDIES}")
    rows = {"impact_of_k": impact_of_k, "nc_vs_ncplus": nc_vs_ncplus, "consecutive": consecutive}[kind](
        config, splits, seeds=seeds, **kwargs)
    if out_path is not None:
        write_report(rows, kind, out_path)
    return rows
