"""Training loop, optimizer pieces and evaluation for Newton-Cotes rollouts."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .models import Backbone, Graph, build_backbone, load_checkpoint, save_checkpoint
from .nbody import TrajectorySample, read_dataset, split_samples
from .rollout import RolloutConfig, losses, predict, rollout, total_loss

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_COLUMNS = [
    "epoch", "train_loss", "train_main", "train_reg", "valid_mse", "test_mse", "valid_vel_mse_interior",
    *[f"valid_vel_mse_k{k}" for k in range(9)],
    "reg_weight", "param_reg_weight", "wall_clock_seconds",
]


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[ad.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients by ``max_norm / norm`` when their global norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    factor = max_norm / norm
    return [g * factor for g in grads]


# --- configuration ----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 200
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_grad_norm: float = 1.0
    param_reg: float = 1.0
    param_reg_decay: float = 0.99
    seed: int = 0
    backbone: str = "egnn"
    hidden: int = 64
    layers: int = 4
    layer_norm: bool = True
    input_feature_normalization: bool = False
    # radial-field only: multiply the whole update by |v_i| as well as gating on it
    rf_norm_prefactor: bool = True
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    data_path: str | None = None
    n_train: int = 500
    n_valid: int = 100
    n_test: int = 100
    eval_every: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.rollout, dict):
            self.rollout = RolloutConfig(**self.rollout)
        self.betas = tuple(self.betas)
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- data -------------------------------------------------------------------


@dataclass
class Batch:
    graph: Graph
    x0: np.ndarray
    v0: np.ndarray
    x_target: np.ndarray
    v_nodes: np.ndarray | None  # (K+1, rows, 3)


class WindowData:
    """Stacked arrays of many samples for one rollout order."""

    def __init__(self, samples: Sequence[TrajectorySample], order: int):
        if not samples:
            raise ValueError("empty dataset")
        ns = {s.n for s in samples}
        if len(ns) != 1:
            raise ValueError(f"all samples must have the same particle count, got {sorted(ns)}")
        ts = {s.t_window for s in samples}
        if len(ts) != 1:
            raise ValueError("all samples must share one window duration")
        self.order = order
        self.n = ns.pop()
        self.t_window = ts.pop()
        for s in samples:
            if order > s.k or (order and s.k % order):
                raise ValueError(f"sample seed={s.seed} has K={s.k}; cannot train or evaluate order {order}")
        self.x0 = np.stack([s.frames[0].x for s in samples])
        self.v0 = np.stack([s.frames[0].v for s in samples])
        self.x_target = np.stack([s.frames[-1].x for s in samples])
        self.charges = np.stack([s.charges for s in samples])
        idx = [s.frame_indices(order) for s in samples]
        self.v_nodes = np.stack([np.stack([s.frames[i].v for i in ix]) for s, ix in zip(samples, idx)])

    def __len__(self) -> int:
        return len(self.x0)

    def batch(self, index: np.ndarray) -> Batch:
        b = len(index)
        flat = lambda a: a[index].reshape(b * self.n, 3)
        v_nodes = self.v_nodes[index].transpose(1, 0, 2, 3).reshape(self.v_nodes.shape[1], b * self.n, 3)
        return Batch(Graph.fully_connected(self.charges[index]), flat(self.x0), flat(self.v0),
                     flat(self.x_target), v_nodes)


def _check_window(config: RolloutConfig, data: WindowData) -> None:
    if abs(config.t_window - data.t_window) > 1e-12:
        raise ValueError(f"rollout window T={config.t_window} differs from dataset T={data.t_window}")


# --- evaluation -------------------------------------------------------------


def evaluate_model(model: Backbone, data: WindowData | Sequence[TrajectorySample], config: RolloutConfig,
                   batch_size: int = 500) -> dict:
    """Mean coordinate MSE at ``T`` and per-node velocity MSE, without recording a tape."""
    if not isinstance(data, WindowData):
        if len(data) == 0:
            raise ValueError("empty evaluation set")
        data = WindowData(data, config.order)
    _check_window(config, data)
    sq_err = 0.0
    vel_err = np.zeros(config.order + 1)
    count = 0
    for start in range(0, len(data), batch_size):
        b = data.batch(np.arange(start, min(start + batch_size, len(data))))
        trace = rollout(model, b.x0, b.v0, b.graph, config)
        x_hat = predict(trace).data
        sq_err += float(np.sum((x_hat - b.x_target) ** 2))
        for k, v in enumerate(trace.velocities):
            vel_err[k] += float(np.sum((v.data - b.v_nodes[k]) ** 2))
        count += b.x0.size
    mse = sq_err / count
    vel = vel_err / count
    interior = float(vel[1:-1].mean()) if config.order > 1 else float("nan")
    return {"mse": mse, "mse_x100": mse * 100.0, "vel_mse": vel.tolist(), "vel_mse_interior": interior}


def evaluate(checkpoint, dataset, config: RolloutConfig | None = None) -> dict:
    """Evaluate a saved checkpoint on a dataset file or list of samples."""
    model, extra = load_checkpoint(checkpoint)
    if config is None:
        if "rollout" not in extra:
            raise ValueError(f"{checkpoint}: no rollout config stored; pass one explicitly")
        config = RolloutConfig(**extra["rollout"])
    samples = read_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not samples:
        raise ValueError("empty evaluation set")
    return evaluate_model(model, samples, config)


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: Backbone
    metrics: list[dict]
    best_epoch: int
    best_valid_mse: float
    test_mse: float
    test_metrics: dict
    rollout_config: RolloutConfig
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def param_penalty(params: Sequence[ad.Tensor], weight: float) -> tuple[float, list[np.ndarray]]:
    """``weight * mean(w^2)`` over all entries of weight matrices and the embedding.

    Biases and layer-norm parameters (1-D tensors) are not penalized.
    Returns the penalty and its gradient for every tensor in ``params``.
    """
    mats = [p.data.ndim == 2 for p in params]
    count = sum(p.data.size for p, m in zip(params, mats) if m)
    if weight == 0 or count == 0:
        return 0.0, [np.zeros_like(p.data) for p in params]
    value = weight * sum(float(np.sum(p.data * p.data)) for p, m in zip(params, mats) if m) / count
    grads = [(2.0 * weight / count) * p.data if m else np.zeros_like(p.data) for p, m in zip(params, mats)]
    return value, grads


def train_step(model: Backbone, batch: Batch, config: TrainConfig, epoch: int, state: AdamState,
               params: Sequence[ad.Tensor]) -> dict:
    """Forward, backward, penalty, clipping and one Adam update on one batch."""
    rc = config.rollout
    with ad.Tape() as tape:
        trace = rollout(model, batch.x0, batch.v0, batch.graph, rc)
        main, reg = losses(trace, batch.x_target, batch.v_nodes, rc)
        loss = total_loss(main, reg, rc, epoch)
    grads = tape.backward(loss, params)
    penalty, pgrads = param_penalty(params, config.param_reg * config.param_reg_decay**epoch)
    if penalty:
        grads = [g + pg for g, pg in zip(grads, pgrads)]
    grads = clip_gradients(grads, config.clip_grad_norm)
    adam_step(params, grads, state, config.learning_rate, config.betas, config.eps)
    return {"loss": loss.item() + penalty, "main": main.item(), "reg": reg.item() if reg is not None else float("nan")}


def load_splits(config: TrainConfig, samples: Sequence[TrajectorySample] | None = None):
    if samples is None:
        if config.data_path is None:
            raise ValueError("no dataset: set data_path or pass samples")
        samples = read_dataset(config.data_path)
    return split_samples(samples, [config.n_train, config.n_valid, config.n_test])


def train(config: TrainConfig, samples: Sequence[TrajectorySample] | None = None,
          splits: tuple | None = None) -> TrainResult:
    """Fit a backbone inside the Newton-Cotes rollout.

    Data come from ``splits`` (train, valid, test sample lists), ``samples``
    (split by the configured sizes) or ``config.data_path``.  The parameters
    with the lowest validation MSE are kept; when ``config.out_dir`` is set
    the checkpoint and ``metrics.csv`` are written there.
    """
    if splits is None:
        splits = load_splits(config, samples)
    train_s, valid_s, test_s = splits
    rc = config.rollout
    train_d = WindowData(train_s, rc.order)
    if rc.normalize_intermediate:
        rc = replace(rc, velocity_scale=float(np.sqrt(np.mean(train_d.v0**2))))
        config = replace(config, rollout=rc)
    valid_d = WindowData(valid_s, rc.order)
    test_d = WindowData(test_s, rc.order) if test_s else None
    _check_window(rc, train_d)
    if config.batch_size > len(train_d):
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {len(train_d)}")

    init_rng, shuffle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    options = {"norm_prefactor": config.rf_norm_prefactor} if config.backbone == "rf" else {}
    model = build_backbone(config.backbone, config.hidden, config.layers,
                           seed=int(init_rng.integers(2**31)), layer_norm=config.layer_norm, **options)
    if config.input_feature_normalization:
        model.fit_feature_normalization(train_d.charges)
    params = model.parameters()
    state = AdamState.zeros_like(params)

    metrics: list[dict] = []
    best = (np.inf, -1, None)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_d))
        stats = []
        for start in range(0, len(order), config.batch_size):
            stats.append(train_step(model, train_d.batch(order[start:start + config.batch_size]), config,
                                    epoch, state, params))
        if (epoch + 1) % config.eval_every and epoch != config.epochs - 1:
            continue
        valid = evaluate_model(model, valid_d, rc)
        test = evaluate_model(model, test_d, rc) if test_d is not None else {"mse": float("nan")}
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean([s["loss"] for s in stats])),
            "train_main": float(np.mean([s["main"] for s in stats])),
            "train_reg": float(np.mean([s["reg"] for s in stats])),
            "valid_mse": valid["mse"],
            "test_mse": test["mse"],
            "valid_vel_mse_interior": valid["vel_mse_interior"],
            "reg_weight": rc.reg_weight_at(epoch) if rc.use_velocity_reg else 0.0,
            "param_reg_weight": config.param_reg * config.param_reg_decay**epoch,
            "wall_clock_seconds": time.perf_counter() - t0,
        }
        for k, val in enumerate(valid["vel_mse"]):
            row[f"valid_vel_mse_k{k}"] = val
        metrics.append(row)
        if not np.isfinite(valid["mse"]):
            raise FloatingPointError(f"validation MSE became non-finite at epoch {epoch + 1}")
        if valid["mse"] < best[0]:
            best = (valid["mse"], epoch + 1, [p.data.copy() for p in params])
        log.debug("epoch %d train %.5g valid %.5g", epoch + 1, row["train_loss"], row["valid_mse"])

    for p, arr in zip(params, best[2]):
        p.data = arr
    test_metrics = evaluate_model(model, test_d, rc) if test_d is not None else {"mse": float("nan")}
    result = TrainResult(model, metrics, best[1], best[0], test_metrics["mse"], test_metrics, rc)
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = str(out / "checkpoint.json")
        result.metrics_path = str(out / "metrics.csv")
        save_checkpoint(model, result.checkpoint_path,
                        extra={"rollout": rc.to_dict(), "train": config.to_dict(), "best_epoch": best[1]})
        write_metrics(metrics, result.metrics_path)
    return result


def write_metrics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return v
