"""Charged-particle N-body simulator and the JSON Lines trajectory format.

Particles interact through a softened Coulomb force

    F_ij = q_i q_j (x_i - x_j) / (|x_i - x_j|^2 + eps^2)^(3/2)

and are advanced with kick-drift-kick leapfrog.  All integration routines
accept arrays with a leading batch axis so many systems can be stepped at
once.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SOFTENING = 0.1
BOX_SIZE = 5.0
VELOCITY_STD = 0.5


@dataclass
class SystemState:
    positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    charges: np.ndarray  # (N,)
    masses: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.charges = np.asarray(self.charges, dtype=np.float64)
        if self.masses is None:
            self.masses = np.ones(len(self.charges))
        n = len(self.charges)
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError(f"state shapes {self.positions.shape}, {self.velocities.shape} do not match {n} particles")
        if n < 2:
            raise ValueError("a system needs at least 2 particles")

    @property
    def n(self) -> int:
        return len(self.charges)

    def momentum(self) -> np.ndarray:
        return (self.masses[:, None] * self.velocities).sum(axis=0)

    def energy(self, softening: float = SOFTENING) -> float:
        kinetic = 0.5 * np.sum(self.masses[:, None] * self.velocities**2)
        return float(kinetic + potential_energy(self.positions, self.charges, softening))

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "SystemState":
        return SystemState(self.positions @ rotation.T + translation, self.velocities @ rotation.T,
                           self.charges.copy(), self.masses.copy())


@dataclass
class Frame:
    t: float
    x: np.ndarray
    v: np.ndarray


@dataclass
class TrajectorySample:
    seed: int
    n: int
    t_window: float
    k: int
    dt: float
    charges: np.ndarray
    frames: list[Frame] = field(default_factory=list)

    def state(self, index: int) -> SystemState:
        f = self.frames[index]
        return SystemState(f.x, f.v, self.charges)

    @property
    def initial(self) -> SystemState:
        return self.state(0)

    @property
    def target(self) -> SystemState:
        return self.state(-1)

    def velocities_at_order(self, order: int) -> np.ndarray:
        """Ground-truth velocities at ``t_window * k / order``, shape (order+1, N, 3)."""
        return np.stack([self.frames[i].v for i in self.frame_indices(order)])

    def positions_at_order(self, order: int) -> np.ndarray:
        return np.stack([self.frames[i].x for i in self.frame_indices(order)])

    def frame_indices(self, order: int) -> list[int]:
        """Indices of the frames that an order-``order`` rollout is supervised on."""
        if order == 0:
            return [0]
        if order > self.k or self.k % order:
            raise ValueError(f"sample recorded with K={self.k} cannot provide frames for K={order}")
        stride = self.k // order
        return list(range(0, self.k + 1, stride))


# --- physics ----------------------------------------------------------------


def accelerations(x: np.ndarray, q: np.ndarray, softening: float = SOFTENING) -> np.ndarray:
    """Softened Coulomb accelerations (unit masses); ``x`` is (..., N, 3), ``q`` is (..., N)."""
    d = x[..., :, None, :] - x[..., None, :, :]
    r2 = np.sum(d * d, axis=-1) + softening**2
    w = (q[..., :, None] * q[..., None, :]) / (r2 * np.sqrt(r2))
    n = x.shape[-2]
    w[..., np.arange(n), np.arange(n)] = 0.0
    return np.sum(w[..., None] * d, axis=-2)


def potential_energy(x: np.ndarray, q: np.ndarray, softening: float = SOFTENING) -> float:
    d = x[:, None, :] - x[None, :, :]
    r = np.sqrt(np.sum(d * d, axis=-1) + softening**2)
    iu = np.triu_indices(len(q), 1)
    return float(np.sum((q[:, None] * q[None, :])[iu] / r[iu]))


def leapfrog(x: np.ndarray, v: np.ndarray, q: np.ndarray, dt: float, n_steps: int,
             softening: float = SOFTENING) -> tuple[np.ndarray, np.ndarray]:
    """Advance ``n_steps`` kick-drift-kick steps; returns new arrays."""
    x = np.array(x, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    a = accelerations(x, q, softening)
    for _ in range(n_steps):
        v += 0.5 * dt * a
        x += dt * v
        a = accelerations(x, q, softening)
        v += 0.5 * dt * a
    return x, v


def step(state: SystemState, dt: float, softening: float = SOFTENING) -> SystemState:
    """One kick-drift-kick step (masses are taken as 1)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, v = leapfrog(state.positions, state.velocities, state.charges, dt, 1, softening)
    return SystemState(x, v, state.charges, state.masses)


def init_system(seed: int, n: int, softening: float = SOFTENING) -> SystemState:
    """Random initial condition: uniform positions in a box, Gaussian velocities, +-1 charges."""
    if n < 2:
        raise ValueError("a system needs at least 2 particles")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, BOX_SIZE, (n, 3))
    # resample any particle that sits closer than the softening length to an earlier one
    for i in range(1, n):
        while np.min(np.linalg.norm(x[:i] - x[i], axis=1)) < softening:
            x[i] = rng.uniform(0.0, BOX_SIZE, 3)
    v = rng.normal(0.0, VELOCITY_STD, (n, 3))
    q = rng.choice([-1.0, 1.0], size=n)
    return SystemState(x, v, q)


def _steps_per_frame(t_window: float, k: int, dt: float) -> int:
    if t_window <= 0 or dt <= 0 or k < 1:
        raise ValueError("need t_window > 0, dt > 0 and k >= 1")
    ratio = t_window / (k * dt)
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"T/K = {t_window / k} is not an integer multiple of dt = {dt}")
    return steps


def integrate_frames(state: SystemState, t_window: float, k: int, dt: float,
                     softening: float = SOFTENING) -> list[Frame]:
    steps = _steps_per_frame(t_window, k, dt)
    frames = [Frame(0.0, state.positions.copy(), state.velocities.copy())]
    x, v = state.positions, state.velocities
    for i in range(1, k + 1):
        x, v = leapfrog(x, v, state.charges, dt, steps, softening)
        frames.append(Frame(i * t_window / k, x, v))
    return frames


def sample_trajectory(seed: int, n: int, t_window: float = 1.0, k: int = 2, dt: float = 1e-3,
                      softening: float = SOFTENING) -> TrajectorySample:
    """Simulate one window and record ``k + 1`` equally spaced frames."""
    state = init_system(seed, n, softening)
    frames = integrate_frames(state, t_window, k, dt, softening)
    return TrajectorySample(seed, n, t_window, k, dt, state.charges, frames)


def _sample_chunk(args) -> list[TrajectorySample]:
    seeds, n, t_window, k, dt = args
    steps = _steps_per_frame(t_window, k, dt)
    states = [init_system(s, n) for s in seeds]
    x = np.stack([s.positions for s in states])
    v = np.stack([s.velocities for s in states])
    q = np.stack([s.charges for s in states])
    frames = [[Frame(0.0, x[b].copy(), v[b].copy())] for b in range(len(seeds))]
    for i in range(1, k + 1):
        x, v = leapfrog(x, v, q, dt, steps)
        for b in range(len(seeds)):
            frames[b].append(Frame(i * t_window / k, x[b].copy(), v[b].copy()))
    return [TrajectorySample(s, n, t_window, k, dt, q[b].copy(), frames[b]) for b, s in enumerate(seeds)]


def worker_count() -> int:
    env = os.environ.get("NC_DYN_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, os.cpu_count() or 1))


def generate(seed: int, count: int, n: int, t_window: float = 1.0, k: int = 2, dt: float = 1e-3,
             workers: int | None = None, chunk: int = 64) -> list[TrajectorySample]:
    """``count`` samples with seeds ``seed, seed+1, ...``, returned in seed order.

    Systems are integrated in vectorized chunks; chunks run in a process pool
    when more than one worker is allowed.  Batched and single-system
    integration agree to rounding, not bit-for-bit.
    """
    seeds = list(range(seed, seed + count))
    jobs = [(seeds[i:i + chunk], n, t_window, k, dt) for i in range(0, count, chunk)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sample_chunk, jobs))
    else:
        parts = [_sample_chunk(j) for j in jobs]
    return [s for part in parts for s in part]


# --- JSON Lines -------------------------------------------------------------


def sample_to_dict(sample: TrajectorySample) -> dict:
    return {
        "seed": int(sample.seed),
        "n": int(sample.n),
        "t_window": float(sample.t_window),
        "k": int(sample.k),
        "dt": float(sample.dt),
        "charges": [float(c) for c in sample.charges],
        "frames": [{"t": float(f.t), "x": f.x.tolist(), "v": f.v.tolist()} for f in sample.frames],
    }


def sample_from_dict(d: dict) -> TrajectorySample:
    n, k = int(d["n"]), int(d["k"])
    charges = np.asarray(d["charges"], dtype=np.float64)
    frames = [Frame(float(f["t"]), np.asarray(f["x"], dtype=np.float64), np.asarray(f["v"], dtype=np.float64))
              for f in d["frames"]]
    if charges.shape != (n,):
        raise ValueError(f"expected {n} charges, got {charges.shape[0]}")
    if len(frames) != k + 1:
        raise ValueError(f"expected {k + 1} frames, got {len(frames)}")
    for f in frames:
        if f.x.shape != (n, 3) or f.v.shape != (n, 3):
            raise ValueError(f"frame at t={f.t} has shapes {f.x.shape}, {f.v.shape}")
    return TrajectorySample(int(d["seed"]), n, float(d["t_window"]), k, float(d["dt"]), charges, frames)


def write_dataset(samples: Iterable[TrajectorySample], path: str | os.PathLike) -> int:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to write")
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s)) + "\n")
    log.info("wrote %d samples to %s", len(samples), path)
    return len(samples)


def read_dataset(path: str | os.PathLike) -> list[TrajectorySample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample: {exc}") from exc
    if not samples:
        raise ValueError(f"{path}: no samples")
    return samples


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def split_samples(samples: Sequence[TrajectorySample], sizes: Sequence[int]) -> list[list[TrajectorySample]]:
    if sum(sizes) > len(samples):
        raise ValueError(f"split {tuple(sizes)} needs {sum(sizes)} samples, have {len(samples)}")
    out, start = [], 0
    for n in sizes:
        out.append(list(samples[start:start + n]))
        start += n
    return out
