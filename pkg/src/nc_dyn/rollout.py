"""Recurrent Newton-Cotes rollout around a velocity backbone.

For order ``K`` the backbone is applied repeatedly over ``[0, T]``: each
call sees the current coordinate estimate and the previous velocity, its
output advances the coordinates by one sub-interval ``T/K``, and the
collected velocities are combined with Newton-Cotes weights:

    x_hat_T = x_0 + (T/K) * sum_k w_k v_hat_k        (K = 0: x_0 + T v_hat_0)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Backbone, Graph
from .nbody import SystemState
from .quadrature import MAX_ORDER, NCWeights, nc_weights

log = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    pass


@dataclass
class RolloutConfig:
    order: int = 2
    use_velocity_reg: bool = False
    reg_weight: float = 1e-3
    reg_decay: float = 0.999
    t_window: float = 1.0
    # which K+1 velocities enter the quadrature: backbone "outputs" or the
    # velocities fed as "inputs" (raw v_0 followed by the first K outputs)
    quadrature_nodes: str = "outputs"
    normalize_intermediate: bool = True
    # divisor for fed-back velocities when normalize_intermediate is set;
    # training fits it to the RMS velocity component of the training set
    velocity_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.order <= MAX_ORDER:
            raise ValueError(f"order must be in [0, {MAX_ORDER}], got {self.order}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if self.t_window <= 0:
            raise ValueError("t_window must be positive")
        if self.velocity_scale <= 0:
            raise ValueError("velocity_scale must be positive")
        if self.quadrature_nodes not in ("outputs", "inputs"):
            raise ValueError("quadrature_nodes must be 'outputs' or 'inputs'")

    @property
    def sub_interval(self) -> float:
        return self.t_window / self.order if self.order else self.t_window

    def reg_weight_at(self, epoch: int) -> float:
        return self.reg_weight * self.reg_decay**epoch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutTrace:
    """Velocities and coordinates produced by one rollout.

    ``velocities`` are the K+1 quadrature nodes, ``outputs`` every backbone
    output, ``inputs`` the velocities fed to each call and ``positions`` the
    coordinates each call saw (``positions[0]`` is the true ``x_0``).
    """

    x0: Tensor
    v0: Tensor
    velocities: list[Tensor]
    outputs: list[Tensor]
    inputs: list[Tensor]
    positions: list[Tensor]
    t_window: float

    @property
    def order(self) -> int:
        return len(self.velocities) - 1


def feed_velocity(v_hat: Tensor, config: RolloutConfig) -> Tensor:
    """Velocity passed to the next backbone call.

    With ``normalize_intermediate`` the output is divided by the fixed
    ``velocity_scale``.  A constant scalar keeps equivariance and leaves the
    result independent of how systems are batched.
    """
    if not config.normalize_intermediate or config.velocity_scale == 1.0:
        return v_hat
    return ad.scale(v_hat, 1.0 / config.velocity_scale)


def _check_finite(t: Tensor, what: str, step: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise RolloutError(f"non-finite {what} at rollout step {step}")


def rollout(backbone: Backbone, x0, v0, graph: Graph, config: RolloutConfig) -> RolloutTrace:
    """Run the backbone recurrently over one window.

    Call ``i`` sees ``(x_i, u_i)`` with ``x_0, u_0`` the true initial state,
    ``x_i = x_{i-1} + v_hat_{i-1} * T/K`` and ``u_i`` the (optionally
    normalized) previous output.  Gradients flow through the whole chain.
    """
    x0, v0 = ad._as_tensor(x0), ad._as_tensor(v0)
    K, dt = config.order, config.sub_interval
    calls = K + 1 if config.quadrature_nodes == "outputs" else max(K, 1)
    x, u = x0, v0
    outputs, inputs, positions = [], [], []
    for i in range(calls):
        if i > 0:
            x = ad.add(x, ad.scale(outputs[-1], dt))
            u = feed_velocity(outputs[-1], config)
        positions.append(x)
        inputs.append(u)
        out = backbone.velocity(x, u, graph)
        _check_finite(out, "velocity", i)
        outputs.append(out)
    if config.quadrature_nodes == "outputs":
        nodes = outputs
    elif K == 0:
        nodes = [v0]
    else:
        nodes = [v0, *outputs[:K]]
    return RolloutTrace(x0, v0, nodes, outputs, inputs, positions, config.t_window)


def rollout_state(backbone: Backbone, state: SystemState, config: RolloutConfig) -> RolloutTrace:
    return rollout(backbone, ad.tensor(state.positions), ad.tensor(state.velocities),
                   Graph.fully_connected(state.charges), config)


def predict(trace: RolloutTrace, weights: NCWeights | None = None) -> Tensor:
    """Newton-Cotes estimate of the terminal coordinates."""
    weights = weights if weights is not None else nc_weights(trace.order)
    if len(weights) != len(trace.velocities):
        raise ValueError(f"trace has {len(trace.velocities)} velocities but weights are order {weights.order}")
    factor = trace.t_window * float(weights.step_factor)
    disp = None
    for w, v in zip(weights.values, trace.velocities):
        term = ad.scale(v, factor * w)
        disp = term if disp is None else ad.add(disp, term)
    return ad.add(trace.x0, disp)


def intermediate_positions(trace: RolloutTrace) -> list[Tensor]:
    """Coordinate estimates at the interior nodes ``t_k``, ``0 < k < K``."""
    return trace.positions[1:trace.order] if trace.order > 1 else []


def losses(trace: RolloutTrace, x_target, v_nodes=None, config: RolloutConfig | None = None,
           x_hat: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """Main coordinate MSE and the velocity-supervision term.

    ``v_nodes`` holds the true velocities at the K+1 nodes, shape
    (K+1, rows, 3).  The velocity term is the MSE over all nodes, particles
    and components; it is returned whenever ``v_nodes`` is given and is
    required when ``config.use_velocity_reg`` is set.
    """
    x_hat = predict(trace) if x_hat is None else x_hat
    main = ad.mse_loss(x_hat, ad._as_tensor(x_target))
    if v_nodes is None:
        if config is not None and config.use_velocity_reg:
            raise ValueError("velocity regularization needs ground-truth velocities at every node")
        return main, None
    v_nodes = np.asarray(v_nodes.data if isinstance(v_nodes, Tensor) else v_nodes)
    if v_nodes.shape[0] != len(trace.velocities):
        raise ValueError(f"need {len(trace.velocities)} node velocities, got {v_nodes.shape[0]}")
    reg = None
    for v_hat, v_true in zip(trace.velocities, v_nodes):
        term = ad.squared_norm(ad.sub(v_hat, ad.tensor(v_true)))
        reg = term if reg is None else ad.add(reg, term)
    reg = ad.scale(reg, 1.0 / v_nodes.size)
    return main, reg


def total_loss(main: Tensor, reg: Tensor | None, config: RolloutConfig, epoch: int) -> Tensor:
    if config.use_velocity_reg and reg is not None:
        return ad.add(main, ad.scale(reg, config.reg_weight_at(epoch)))
    return main


# --- consecutive prediction ---------------------------------------------------


def window_mean(states: Sequence[SystemState], times: Sequence[float] | None = None,
                at: float | None = None) -> SystemState:
    """Average of several states of the same system.

    When ``times`` and ``at`` are given, each state is first carried to time
    ``at`` along its own velocity, so a system in uniform motion averages to
    its exact state at ``at``.
    """
    if not states:
        raise ValueError("window_mean needs at least one state")
    xs, vs = [], []
    for i, s in enumerate(states):
        shift = 0.0 if times is None or at is None else at - times[i]
        xs.append(s.positions + shift * s.velocities)
        vs.append(s.velocities)
    ref = states[-1]
    # averaging offsets from the first state keeps identical inputs exact
    x = xs[0] + np.mean([a - xs[0] for a in xs], axis=0)
    v = vs[0] + np.mean([a - vs[0] for a in vs], axis=0)
    return SystemState(x, v, ref.charges, ref.masses)


@dataclass
class ConsecutiveResult:
    times: list[float]
    states: list[SystemState]
    truncated: bool = False


def consecutive_predict(backbone: Backbone, state0: SystemState, config: RolloutConfig,
                        horizon_windows: int, max_coordinate: float = 1e3) -> ConsecutiveResult:
    """Chain windows, emitting one state per node time after ``t = 0``.

    Each window starts from the mean of the ``K + 1`` most recent states
    (time-aligned, see :func:`window_mean`).  For the first window that
    history is just ``state0``, so it reproduces ``rollout`` + ``predict``.
    Emitted states are the intermediate coordinate estimates with their
    velocities, and the Newton-Cotes terminal estimate with the last
    velocity.  A coordinate beyond ``max_coordinate`` stops the chain.
    """
    if horizon_windows < 1:
        raise ValueError("horizon_windows must be >= 1")
    K, T = config.order, config.t_window
    dt = config.sub_interval
    graph = Graph.fully_connected(state0.charges)
    hist_states, hist_times = [state0], [0.0]
    out_times, out_states = [], []
    for w in range(horizon_windows):
        t_start = w * T
        start = window_mean(hist_states[-(K + 1):], hist_times[-(K + 1):], t_start)
        trace = rollout(backbone, ad.tensor(start.positions), ad.tensor(start.velocities), graph, config)
        x_end = predict(trace).data
        new = []
        for i in range(1, K):
            new.append((t_start + i * dt, trace.positions[i].data, trace.velocities[i].data))
        new.append((t_start + T, x_end, trace.velocities[-1].data))
        for t, x, v in new:
            if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) <= max_coordinate):
                log.warning("consecutive prediction diverged at t=%.3g; returning %d states", t, len(out_states))
                return ConsecutiveResult(out_times, out_states, truncated=True)
            s = SystemState(x.copy(), v.copy(), state0.charges, state0.masses)
            out_times.append(t)
            out_states.append(s)
            hist_states.append(s)
            hist_times.append(t)
    return ConsecutiveResult(out_times, out_states)
