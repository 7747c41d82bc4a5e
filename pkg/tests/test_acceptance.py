"""Acceptance criteria 1-9, one test each.

Every test records a PASS/FAIL line in ``RESULTS`` before asserting; conftest
prints them in the terminal summary. Criteria 6-8 share one set of training
runs per session (about 45 minutes on one CPU core at 300 epochs). Set
``NC_DYN_ACCEPTANCE_EPOCHS`` for a quicker, non-conforming dry run.
"""

import os
import time

import numpy as np
import pytest

from nc_dyn import autodiff as ad
from nc_dyn.models import Graph, build_backbone, egnn_velocity
from nc_dyn.nbody import (SystemState, generate, init_system, random_rotation, sample_trajectory,
                          split_samples)
from nc_dyn.quadrature import MAX_ORDER, empirical_order, nc_integrate, nc_weights, sample_nodes
from nc_dyn.rollout import RolloutConfig, losses, predict, rollout, total_loss
from nc_dyn.studies import consecutive_errors, heldout_trajectories
from nc_dyn.training import TrainConfig, evaluate_model, train
from gradcheck import check, make_case, numeric_grad, rel_error
from oracles import moment_oracle

RESULTS: dict[int, tuple[bool, str]] = {}

EPOCHS = int(os.environ.get("NC_DYN_ACCEPTANCE_EPOCHS", 300))
SEEDS = (0, 1, 2)
DATA_SEED = 1000


def record(criterion: int, passed: bool, detail: str) -> bool:
    RESULTS[criterion] = (bool(passed), detail)
    return bool(passed)


# --- 1. quadrature exactness -------------------------------------------------


def test_criterion_1_quadrature_exactness():
    t0 = time.perf_counter()
    weights_ok = all(nc_weights(k).exact == moment_oracle(k) for k in range(1, 7))
    sums_ok = all(sum(nc_weights(k).exact) == k for k in range(1, 7))
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(300):
        order = int(rng.integers(1, 7))
        duration = float(rng.uniform(0.1, 3.0))
        poly = np.polynomial.Polynomial(rng.normal(size=int(rng.integers(0, order + 1)) + 1))
        exact = poly.integ()(duration) - poly.integ()(0.0)
        est = nc_integrate(poly(sample_nodes(order, duration)), duration)
        worst = max(worst, abs(est - exact) / max(1.0, abs(exact)))
    elapsed = time.perf_counter() - t0
    ok = weights_ok and sums_ok and worst < 1e-12 and elapsed < 1.0
    record(1, ok, f"oracle match {weights_ok}, sums {sums_ok}, worst poly error {worst:.1e}, {elapsed:.2f}s")
    assert ok


# --- 2. convergence orders ---------------------------------------------------


CURVES = {
    "sin": (np.sin, lambda T: 1.0 - np.cos(T)),
    "exp": (np.exp, np.expm1),
    "1/(1+t)": (lambda t: 1.0 / (1.0 + t), np.log1p),
}


def test_criterion_2_convergence_orders():
    t0 = time.perf_counter()
    f, F = CURVES["sin"]
    slopes = [empirical_order(f, k, F) for k in (0, 1, 2)]
    slopes_ok = [abs(slopes[0] - 2.0) <= 0.3, abs(slopes[1] - 3.0) <= 0.3, slopes[2] >= 4.5]
    # diagnostic only: the same curve seen from a window that starts at t = 0.5
    shifted = empirical_order(lambda t: np.sin(t + 0.5), 1, lambda T: np.cos(0.5) - np.cos(T + 0.5))
    decreasing = {}
    for name, (f, F) in CURVES.items():
        errs = [abs(nc_integrate(f(sample_nodes(k, 1.0)), 1.0) - F(1.0)) for k in range(MAX_ORDER + 1)]
        decreasing[name] = all(b < a for a, b in zip(errs, errs[1:]))
    elapsed = time.perf_counter() - t0
    ok = all(slopes_ok) and all(decreasing.values()) and elapsed < 1.0
    record(2, ok, "sin slopes K=0,1,2: " + ", ".join(f"{s:.2f}{'' if g else ' (out of band)'}"
                                                     for s, g in zip(slopes, slopes_ok))
           + f" (K=1 from t=0.5: {shifted:.2f}); strictly decreasing in K: {decreasing}; {elapsed:.2f}s")
    assert ok


# --- 3. equivariance ---------------------------------------------------------


def _batched_transforms(state, rng, count):
    """Original system followed by ``count`` rigidly moved copies, as one batch."""
    rots = [np.eye(3)] + [random_rotation(rng) for _ in range(count)]
    shifts = [np.zeros(3)] + [rng.normal(size=3) * 5 for _ in range(count)]
    x = np.concatenate([state.positions @ r.T + b for r, b in zip(rots, shifts)])
    v = np.concatenate([state.velocities @ r.T for r in rots])
    graph = Graph.fully_connected(np.tile(state.charges, (count + 1, 1)))
    return x, v, graph, rots, shifts


def _commutation_error(out, rots, shifts, n, translate):
    out = out.reshape(len(rots), n, 3)
    return max(np.max(np.abs(out[i] - (out[0] @ r.T + (b if translate else 0.0))))
               for i, (r, b) in enumerate(zip(rots, shifts)) if i > 0)


def test_criterion_3_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {}
    for draw in range(50):
        state = init_system(int(rng.integers(1 << 30)), 5)
        x, v, graph, rots, shifts = _batched_transforms(state, rng, 20)
        for kind in ("egnn", "rf"):
            model = build_backbone(kind, hidden=64, layers=4, seed=draw, init="random")
            err = _commutation_error(model.velocity(x, v, graph).data, rots, shifts, 5, translate=False)
            worst[kind] = max(worst.get(kind, 0.0), err)
            for order in range(4):
                cfg = RolloutConfig(order=order, velocity_scale=0.6)
                out = predict(rollout(model, x, v, graph, cfg)).data
                key = f"NC({order})-{kind}"
                worst[key] = max(worst.get(key, 0.0), _commutation_error(out, rots, shifts, 5, translate=True))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-5 and elapsed < 30.0
    record(3, ok, f"max error {top:.1e} over {len(worst)} model/pipeline kinds, 50 draws x 20 transforms, "
                  f"{elapsed:.1f}s")
    assert ok


# --- 4. autodiff soundness ---------------------------------------------------


def _rollout_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    s = init_system(seed, n)
    g = Graph.fully_connected(s.charges)
    v_nodes = rng.normal(size=(3, n, 3)) * 0.5
    target = s.positions + s.velocities + rng.normal(size=(n, 3)) * 0.1
    cfg = RolloutConfig(order=2, use_velocity_reg=bool(seed % 2), reg_weight=0.3,
                        velocity_scale=float(rng.uniform(0.5, 1.5)))
    m = build_backbone(("egnn", "rf")[seed % 3 == 0], hidden=6, layers=2, seed=seed, init="random")
    params = m.parameters()

    def loss():
        trace = rollout(m, s.positions, s.velocities, g, cfg)
        return total_loss(*losses(trace, target, v_nodes, cfg), cfg, 0)

    with ad.Tape() as tape:
        value = loss()
    ga = tape.backward(value, params)

    def f(arrays):
        for t, a in zip(params, arrays):
            t.data = a
        return loss().item()

    gn = numeric_grad(f, [p.data.copy() for p in params])
    return rel_error(ga, gn)


def test_criterion_4_autodiff_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    op_errors = [check(*make_case(op, rng)) for op in ad.OP_KINDS for _ in range(8)]
    rollout_errors = [_rollout_case(seed) for seed in range(12)]
    elapsed = time.perf_counter() - t0
    cases = len(op_errors) + len(rollout_errors)
    worst = max(op_errors + rollout_errors)
    ok = worst < 1e-4 and cases >= 100 and elapsed < 60.0
    record(4, ok, f"{len(op_errors)} op cases (worst {max(op_errors):.1e}) + {len(rollout_errors)} NC(2) "
                  f"rollout cases (worst {max(rollout_errors):.1e}), {elapsed:.1f}s")
    assert ok


# --- 5. simulator fidelity ---------------------------------------------------


def test_criterion_5_simulator_fidelity():
    t0 = time.perf_counter()
    drift, drift_fine, excursion, gap, momentum = [], [], [], [], []
    for seed in range(20):
        coarse = sample_trajectory(seed, 5, 1.0, 10, 1e-3)
        fine = sample_trajectory(seed, 5, 1.0, 10, 1e-4)
        e0 = coarse.initial.energy()
        drift.append(abs(coarse.target.energy() - e0) / abs(e0))
        drift_fine.append(abs(fine.target.energy() - e0) / abs(e0))
        excursion.append(max(abs(coarse.state(i).energy() - e0) for i in range(11)) / abs(e0))
        gap.append(max(np.max(np.abs(a.x - b.x)) for a, b in zip(coarse.frames, fine.frames)))
        p0 = coarse.initial.momentum()
        momentum.append(max(np.max(np.abs(coarse.state(i).momentum() - p0)) for i in range(11)))
    elapsed = time.perf_counter() - t0
    # second order: the refined run must shrink the drift by close to 100x
    refined = all(f <= c / 50 or c < 1e-12 for c, f in zip(drift, drift_fine))
    ok = max(momentum) < 1e-10 and max(drift) < 1e-4 and refined and max(gap) < 1e-4 and elapsed < 120
    record(5, ok, f"momentum {max(momentum):.1e}, window drift max {max(drift):.1e} "
                  f"(dt/10: {max(drift_fine):.1e}), in-window excursion max {max(excursion):.1e}, "
                  f"dt vs dt/10 position gap {max(gap):.1e}, 20 seeds, {elapsed:.1f}s")
    assert ok


# --- shared training runs for 6-8 -------------------------------------------


class Runs:
    """Lazily trained models, one per (backbone, order, plus, seed)."""

    def __init__(self):
        samples = generate(DATA_SEED, 700, 5, t_window=1.0, k=60, dt=1 / 1020)
        self.splits = split_samples(samples, [500, 100, 100])
        self.cache = {}

    def get(self, backbone, order, plus, seed):
        key = (backbone, order, plus, seed)
        if key not in self.cache:
            cfg = TrainConfig(epochs=EPOCHS, seed=seed, backbone=backbone, eval_every=5,
                              rollout=RolloutConfig(order=order, use_velocity_reg=plus))
            t0 = time.perf_counter()
            res = train(cfg, splits=self.splits)
            self.cache[key] = (res, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


@pytest.mark.slow
def test_criterion_6_main_result(runs):
    parts, ok, seconds = [], True, 0.0
    for backbone in ("egnn", "rf"):
        means = {}
        for order in (0, 2):
            got = [runs.get(backbone, order, False, s) for s in SEEDS]
            means[order] = float(np.mean([r.test_mse for r, _ in got]))
            seconds += sum(t for _, t in got)
        ratio = means[2] / means[0]
        ok &= ratio <= 0.9
        parts.append(f"{backbone} NC(0) {means[0]:.5f} NC(2) {means[2]:.5f} ratio {ratio:.3f}")
    ok &= seconds < 45 * 60 and EPOCHS == 300
    record(6, ok, "; ".join(parts) + f"; {EPOCHS} epochs, training {seconds / 60:.1f} min")
    assert ok


def _bounded(metrics, key):
    vals = np.array([m[key] for m in metrics], dtype=float)
    return bool(np.all(np.isfinite(vals)) and np.max(vals) <= 10 * vals[0])


@pytest.mark.slow
def test_criterion_7_nc_vs_ncplus(runs):
    wins, stable, parts = 0, True, []
    valid = runs.splits[1]
    for seed in SEEDS:
        nc, _ = runs.get("egnn", 2, False, seed)
        plus, _ = runs.get("egnn", 2, True, seed)
        a = evaluate_model(nc.model, valid, nc.rollout_config)["vel_mse_interior"]
        b = evaluate_model(plus.model, valid, plus.rollout_config)["vel_mse_interior"]
        wins += b <= a
        for res in (nc, plus):
            stable &= _bounded(res.metrics, "valid_mse") and _bounded(res.metrics, "valid_vel_mse_interior")
        parts.append(f"seed {seed}: NC {a:.5f} NC+ {b:.5f}")
    ok = wins >= 2 and stable
    record(7, ok, f"NC+(2) <= NC(2) on {wins}/3 seeds; finite and bounded {stable}; " + "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_8_consecutive_prediction(runs):
    first = runs.splits[0][0]
    trajectories = heldout_trajectories(10**6, 50, first.n, first.t_window, 10, first.dt)
    wins, parts = 0, []
    for seed in SEEDS:
        finals = {}
        for name, order, plus in (("NC+(2)", 2, True), ("NC(0)", 0, False)):
            res, _ = runs.get("egnn", order, plus, seed)
            errs, _ = consecutive_errors(res.model, res.rollout_config, trajectories, 10)
            finals[name] = float(errs[-1])
        wins += finals["NC+(2)"] < finals["NC(0)"]
        parts.append(f"seed {seed}: NC+(2) {finals['NC+(2)']:.4f} NC(0) {finals['NC(0)']:.4f}")
    ok = wins >= 2
    record(8, ok, f"window-10 position MSE lower for NC+(2) on {wins}/3 seeds; " + "; ".join(parts))
    assert ok


# --- 9. affine superposition in the input velocity --------------------------


def test_criterion_9_linear_in_input_velocity():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        model = build_backbone("egnn", hidden=32, layers=int(rng.integers(1, 5)), seed=int(rng.integers(1 << 30)),
                               init="random")
        s = init_system(int(rng.integers(1 << 30)), int(rng.integers(2, 8)))
        v1, v2 = rng.normal(size=(2, s.n, 3))
        alpha, beta = rng.uniform(-3, 3, size=2)
        f = lambda v: egnn_velocity(model, SystemState(s.positions, v, s.charges)).v_hat
        lhs = f(alpha * v1 + beta * v2)
        rhs = alpha * f(v1) + beta * f(v2) + (1 - alpha - beta) * f(np.zeros_like(v1))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    ok = worst < 1e-8
    record(9, ok, f"EGNN max superposition residual {worst:.1e} over 100 configurations")
    assert ok
