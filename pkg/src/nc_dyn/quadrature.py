"""Closed Newton-Cotes rules on equally spaced nodes.

The weights are obtained by integrating the Lagrange basis polynomials in
exact rational arithmetic, so symmetry and ``sum(w) == K`` hold exactly.
With nodes ``t_k = k*T/K`` the rule is ``(T/K) * sum_k w_k v(t_k)``.
Order zero is the left-endpoint rule ``T * v(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

MAX_ORDER = 8


@dataclass(frozen=True)
class NCWeights:
    order: int
    exact: tuple[Fraction, ...]

    @property
    def values(self) -> np.ndarray:
        return np.array([float(w) for w in self.exact])

    @property
    def step_factor(self) -> Fraction:
        """Multiplier applied to ``T`` in front of the weighted sum: ``1/K`` (1 for K=0)."""
        return Fraction(1, self.order) if self.order else Fraction(1)

    def __len__(self) -> int:
        return len(self.exact)


def _poly_mul(p: list[Fraction], q: list[Fraction]) -> list[Fraction]:
    out = [Fraction(0)] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] += a * b
    return out


@lru_cache(maxsize=None)
def nc_weights(order: int) -> NCWeights:
    """Newton-Cotes weights for ``order + 1`` equally spaced nodes on ``[0, T]``."""
    if not isinstance(order, (int, np.integer)) or order < 0:
        raise ValueError(f"order must be a non-negative integer, got {order!r}")
    if order > MAX_ORDER:
        raise ValueError(f"order {order} > {MAX_ORDER}: high-order closed rules oscillate (Runge)")
    order = int(order)
    if order == 0:
        return NCWeights(0, (Fraction(1),))
    weights = []
    # in the scaled variable s = t*K/T the nodes are 0..K and dt = (T/K) ds
    for k in range(order + 1):
        poly = [Fraction(1)]
        for m in range(order + 1):
            if m != k:
                poly = _poly_mul(poly, [Fraction(-m, k - m), Fraction(1, k - m)])
        weights.append(sum((c * Fraction(order) ** (p + 1) / (p + 1) for p, c in enumerate(poly)), Fraction(0)))
    return NCWeights(order, tuple(weights))


def nc_integrate(values: Sequence[float] | np.ndarray, duration: float, order: int | None = None) -> float | np.ndarray:
    """Estimate the integral over ``[0, duration]`` from samples at ``k*duration/K``.

    ``values`` has ``K + 1`` entries along its first axis; trailing axes (for
    example particle and coordinate axes) are integrated independently.
    """
    vals = np.asarray(values, dtype=np.float64)
    if order is None:
        order = vals.shape[0] - 1
    if vals.shape[0] != order + 1:
        raise ValueError(f"expected {order + 1} samples for order {order}, got {vals.shape[0]}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    w = nc_weights(order)
    est = np.tensordot(w.values, vals, axes=(0, 0))
    return duration * float(w.step_factor) * est


def sample_nodes(order: int, duration: float) -> np.ndarray:
    if order == 0:
        return np.array([0.0])
    return np.arange(order + 1) * (duration / order)


def empirical_order(
    curve: Callable[[np.ndarray], np.ndarray],
    order: int,
    exact: Callable[[float], float],
    t0: float = 1.0,
    levels: int = 4,
) -> float:
    """Slope of ``log|error|`` against ``log T`` for the single-interval rule.

    ``exact(T)`` must return the true integral of ``curve`` over ``[0, T]``.
    The rule is evaluated at ``T = t0, t0/2, ...`` (``levels`` values).
    """
    durations = t0 / 2.0 ** np.arange(levels)
    errors = []
    for T in durations:
        est = nc_integrate(curve(sample_nodes(order, T)), T, order)
        errors.append(abs(est - exact(T)))
    errors = np.asarray(errors)
    if np.any(errors == 0):
        return float("inf")
    slope, _ = np.polyfit(np.log(durations), np.log(errors), 1)
    return float(slope)
