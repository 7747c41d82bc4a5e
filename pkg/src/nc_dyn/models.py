"""E(3)-equivariant velocity predictors (EGNN and radial-field variants).

Every backbone maps positions, velocities and per-particle charges of a
batch of systems to one predicted velocity per particle.  Systems in a
batch all have the same particle count ``N`` and are fully connected.
Edges are ordered receiver-major: for each particle ``i`` the ``N - 1``
edges ``(i, j), j != i`` are consecutive, so aggregation over senders is a
grouped sum.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, Tensor

CHECKPOINT_FORMAT = "nc-dyn-checkpoint/1"


@dataclass
class Graph:
    """Static structure of a batch of ``batch`` fully connected ``n``-particle systems."""

    n: int
    batch: int
    charges: np.ndarray  # (batch*n,)
    rows: np.ndarray  # receiver of each edge
    cols: np.ndarray  # sender of each edge
    reverse: np.ndarray  # edge index of (j, i) for edge (i, j)
    edge_attr: np.ndarray  # (E, 1), product of charges
    node_onehot: np.ndarray  # (batch*n, 2): [negative, positive]

    @classmethod
    def fully_connected(cls, charges: np.ndarray) -> "Graph":
        q = np.atleast_2d(np.asarray(charges, dtype=np.float64))
        b, n = q.shape
        if n < 2:
            raise ValueError("need at least 2 particles per system (aggregation divides by N-1)")
        local_i, local_j = np.nonzero(~np.eye(n, dtype=bool))
        offsets = (np.arange(b) * n)[:, None]
        rows = (offsets + local_i).reshape(-1)
        cols = (offsets + local_j).reshape(-1)
        # position of edge (j, i) inside one system's block of n*(n-1) edges
        lookup = -np.ones((n, n), dtype=np.intp)
        lookup[local_i, local_j] = np.arange(len(local_i))
        rev_local = lookup[local_j, local_i]
        reverse = ((np.arange(b) * n * (n - 1))[:, None] + rev_local).reshape(-1)
        flat = q.reshape(-1)
        onehot = np.stack([flat <= 0, flat > 0], axis=1).astype(np.float64)
        return cls(n, b, flat, rows, cols, reverse, (flat[rows] * flat[cols])[:, None], onehot)

    @property
    def num_nodes(self) -> int:
        return self.n * self.batch


def _zero_(t: Tensor, value: float = 0.0) -> None:
    t.data[...] = value


class Backbone:
    """Shared plumbing: parameter naming, edge-attribute scaling, checkpointing."""

    kind = "base"

    def __init__(self, hidden: int, layer_norm: bool = True):
        self.hidden = hidden
        self.layer_norm = layer_norm
        # optional z-scoring of the edge attribute, fitted on training data
        self.edge_attr_mean = 0.0
        self.edge_attr_std = 1.0

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def config(self) -> dict[str, Any]:
        return {"kind": self.kind, "hidden": self.hidden, "layer_norm": self.layer_norm,
                "edge_attr_mean": self.edge_attr_mean, "edge_attr_std": self.edge_attr_std}

    def fit_feature_normalization(self, charges: np.ndarray) -> None:
        g = Graph.fully_connected(charges)
        self.edge_attr_mean = float(g.edge_attr.mean())
        self.edge_attr_std = float(g.edge_attr.std()) or 1.0

    def _edge_attr(self, graph: Graph) -> np.ndarray:
        return (graph.edge_attr - self.edge_attr_mean) / self.edge_attr_std

    def embed(self, graph: Graph) -> Tensor:
        return ad.matmul(ad.tensor(graph.node_onehot), self.embedding)

    def velocity(self, x, v, graph: Graph) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, v, graph: Graph) -> Tensor:
        return self.velocity(x, v, graph)

    def _gated_update(self, gate: Tensor, v, d: Tensor, coef: Tensor, graph: Graph) -> Tensor:
        """``gate_i * v_i + 1/(N-1) * sum_j (x_i - x_j) * coef_ij``."""
        pull = ad.group_sum(ad.mul_rows(d, coef), graph.n - 1)
        return ad.add(ad.mul_rows(v, gate), ad.scale(pull, 1.0 / (graph.n - 1)))


def _to_edges(a, graph: Graph) -> tuple[Tensor, Tensor]:
    """Node rows copied onto edges as (receiver, sender) pairs."""
    recv = ad.repeat_rows(a, graph.n - 1)
    return recv, ad.permute_rows(recv, graph.reverse)


def _relative(x, graph: Graph) -> tuple[Tensor, Tensor]:
    """Edge vectors ``x_i - x_j`` and their squared lengths."""
    xi, xj = _to_edges(x, graph)
    d = ad.sub(xi, xj)
    return d, ad.squared_norm(d, axis=1)


class EdgeModel:
    """``phi_e(h_i, h_j, |x_i - x_j|^2, e_ij)``: two layers, ReLU after both.

    The first layer's weight is kept as receiver, sender and geometry blocks
    so the feature products can be taken per node before copying to edges;
    the result equals one linear layer on the concatenated input.
    """

    def __init__(self, hidden: int, rng: np.random.Generator, layer_norm: bool, name: str):
        fan_in = 2 * hidden + 2
        bound = 1.0 / np.sqrt(fan_in)
        self.w_recv = ad.parameter(rng.uniform(-bound, bound, (hidden, hidden)), f"{name}.w0_recv")
        self.w_send = ad.parameter(rng.uniform(-bound, bound, (hidden, hidden)), f"{name}.w0_send")
        self.w_geo = ad.parameter(rng.uniform(-bound, bound, (2, hidden)), f"{name}.w0_geo")
        self.b = ad.parameter(rng.uniform(-bound, bound, hidden), f"{name}.b0")
        self.layer_norm = layer_norm
        if layer_norm:
            self.ln_gain = ad.parameter(np.ones(hidden), f"{name}.ln0.gain")
            self.ln_bias = ad.parameter(np.zeros(hidden), f"{name}.ln0.bias")
        self.out = Mlp([hidden, hidden], rng, layer_norm, final_activation=True, name=f"{name}.out")

    @property
    def weights(self) -> list[Tensor]:
        return [self.w_recv, self.w_send, self.w_geo, *self.out.weights]

    def parameters(self) -> list[Tensor]:
        ps = [self.w_recv, self.w_send, self.w_geo, self.b]
        if self.layer_norm:
            ps += [self.ln_gain, self.ln_bias]
        return ps + self.out.parameters()

    def _finish(self, pre: Tensor) -> Tensor:
        if self.layer_norm:
            pre = ad.layer_norm(pre, self.ln_gain, self.ln_bias)
        return self.out(ad.relu(pre))

    def __call__(self, h_recv, h_send, geo) -> Tensor:
        """Explicit per-edge inputs: (E, D), (E, D), (E, 2)."""
        pre = ad.add(ad.add(ad.matmul(h_recv, self.w_recv), ad.matmul(h_send, self.w_send)),
                     ad.linear(geo, self.w_geo, self.b))
        return self._finish(pre)

    def on_graph(self, h, geo, graph: Graph) -> Tensor:
        a_recv = ad.repeat_rows(ad.matmul(h, self.w_recv), graph.n - 1)
        _, a_send = _to_edges(ad.matmul(h, self.w_send), graph)
        pre = ad.add(ad.add(a_recv, a_send), ad.linear(geo, self.w_geo, self.b))
        return self._finish(pre)


class EGNN(Backbone):
    """Multi-layer EGNN where only hidden features evolve between layers.

    Layer ``l`` forms messages ``phi_e(h_i, h_j, |x_i - x_j|^2, e_ij)`` from the
    previous hidden features and the *input* coordinates.  All but the last
    layer update ``h_i <- h_i + phi_h(h_i, sum_j m_ij)``; the last layer's
    messages are turned into scalar weights by ``phi_x`` and the velocity is
    ``phi_v(h_i) v_i + 1/(N-1) sum_j (x_i - x_j) m_ij``.
    """

    kind = "egnn"

    def __init__(self, hidden: int = 64, layers: int = 4, rng: np.random.Generator | None = None,
                 layer_norm: bool = True, init: str = "train"):
        super().__init__(hidden, layer_norm)
        if layers < 1:
            raise ValueError("layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = layers
        self.embedding = ad.parameter(rng.uniform(-1.0, 1.0, (2, hidden)), "embedding")
        self.edge_models = [EdgeModel(hidden, rng, layer_norm, f"edge{l}") for l in range(layers)]
        self.node_mlps = [Mlp([2 * hidden, hidden, hidden], rng, layer_norm, name=f"node{l}")
                          for l in range(layers - 1)]
        self.coord_mlp = Mlp([hidden, hidden, 1], rng, layer_norm, name="coord")
        self.gate_mlp = Mlp([hidden, hidden, 1], rng, layer_norm, name="gate")
        if init == "train":
            # start from x0 + v0*T: unit gate, no pairwise term
            _zero_(self.coord_mlp.weights[-1])
            _zero_(self.coord_mlp.biases[-1])
            _zero_(self.gate_mlp.weights[-1])
            _zero_(self.gate_mlp.biases[-1], 1.0)
        elif init != "random":
            raise ValueError(f"unknown init {init!r}")

    def config(self) -> dict[str, Any]:
        return {**super().config(), "layers": self.layers}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for mlp in [*self.edge_models, *self.node_mlps, self.coord_mlp, self.gate_mlp]:
            out.update({p.name: p for p in mlp.parameters()})
        return out

    def hidden_features(self, x, graph: Graph) -> tuple[Tensor, Tensor, Tensor]:
        """Hidden features entering the last layer, plus edge vectors and last-layer messages."""
        h = self.embed(graph)
        d, d2 = _relative(x, graph)
        geo = ad.concat([d2, ad.tensor(self._edge_attr(graph))], axis=1)
        m = None
        for l, edge_model in enumerate(self.edge_models):
            m = edge_model.on_graph(h, geo, graph)
            if l < self.layers - 1:
                agg = ad.group_sum(m, graph.n - 1)
                h = ad.add(h, self.node_mlps[l](ad.concat([h, agg], axis=1)))
        return h, d, m

    def velocity(self, x, v, graph: Graph) -> Tensor:
        h, d, m = self.hidden_features(x, graph)
        return self._gated_update(self.gate_mlp(h), v, d, self.coord_mlp(m), graph)

    def message(self, h_i, h_j, x_i, x_j, e_ij, layer: int = -1) -> Tensor:
        """Scalar edge weight ``phi_x(phi_e(h_i, h_j, |x_i - x_j|^2, e_ij))`` for explicit edge arrays."""
        h_i, h_j = ad._as_tensor(h_i), ad._as_tensor(h_j)
        if h_i.shape != h_j.shape or h_i.shape[-1] != self.hidden:
            raise ad.ShapeError("egnn_message", h_i.shape, h_j.shape, detail=f"hidden size {self.hidden}")
        d = ad.sub(ad._as_tensor(x_i), ad._as_tensor(x_j))
        e = np.atleast_2d(np.asarray(e_ij, dtype=np.float64).reshape(-1, 1))
        e = ad.tensor((e - self.edge_attr_mean) / self.edge_attr_std)
        m = self.edge_models[layer](h_i, h_j, ad.concat([ad.squared_norm(d, axis=1), e], axis=1))
        return self.coord_mlp(m)


class RadialField(Backbone):
    """Radial-field backbone: no node embedding, messages see only distance and edge attribute.

    The per-particle scalar is the speed ``|v_i|``; it feeds the gate and,
    with ``norm_prefactor``, multiplies the whole update:

        v_hat_i = |v_i| * (phi_v(|v_i|) v_i + 1/(N-1) sum_j (x_i - x_j) m_ij)

    with ``m_ij = phi_x(phi_e(|x_i - x_j|^2, e_ij))``.
    """

    kind = "rf"

    def __init__(self, hidden: int = 64, layers: int = 1, rng: np.random.Generator | None = None,
                 layer_norm: bool = True, init: str = "train", norm_prefactor: bool = True):
        super().__init__(hidden, layer_norm)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = 1
        self.norm_prefactor = norm_prefactor
        self.edge_mlp = Mlp([2, hidden, hidden], rng, layer_norm, final_activation=True, name="edge0")
        self.coord_mlp = Mlp([hidden, hidden, 1], rng, layer_norm, name="coord")
        self.gate_mlp = Mlp([1, hidden, 1], rng, layer_norm, name="gate")
        if init == "train":
            _zero_(self.coord_mlp.weights[-1])
            _zero_(self.coord_mlp.biases[-1])
            _zero_(self.gate_mlp.weights[-1])
            _zero_(self.gate_mlp.biases[-1], 1.0)
        elif init != "random":
            raise ValueError(f"unknown init {init!r}")

    def config(self) -> dict[str, Any]:
        return {**super().config(), "layers": 1, "norm_prefactor": self.norm_prefactor}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for mlp in (self.edge_mlp, self.coord_mlp, self.gate_mlp):
            out.update({p.name: p for p in mlp.parameters()})
        return out

    def velocity(self, x, v, graph: Graph) -> Tensor:
        d, d2 = _relative(x, graph)
        e = ad.tensor(self._edge_attr(graph))
        coef = self.coord_mlp(self.edge_mlp(ad.concat([d2, e], axis=1)))
        speed = ad.row_norm(ad._as_tensor(v))
        out = self._gated_update(self.gate_mlp(speed), v, d, coef, graph)
        return ad.mul_rows(out, speed) if self.norm_prefactor else out


BACKBONES = {"egnn": EGNN, "rf": RadialField}


def build_backbone(kind: str, hidden: int = 64, layers: int = 4, seed: int = 0, layer_norm: bool = True,
                   init: str = "train", **options) -> Backbone:
    """Construct a backbone; ``options`` are passed to the class (e.g. ``norm_prefactor`` for RF)."""
    if kind not in BACKBONES:
        raise ValueError(f"unknown backbone {kind!r}; expected one of {sorted(BACKBONES)}")
    return BACKBONES[kind](hidden=hidden, layers=layers, rng=np.random.default_rng(seed),
                           layer_norm=layer_norm, init=init, **options)


# --- state-level conveniences ----------------------------------------------


@dataclass
class VelocityPrediction:
    v_hat: np.ndarray
    x_hat_next: np.ndarray | None = None


def _state_inputs(state) -> tuple[Tensor, Tensor, Graph]:
    if state.n < 2:
        raise ValueError("need at least 2 particles")
    return ad.tensor(state.positions), ad.tensor(state.velocities), Graph.fully_connected(state.charges)


def egnn_velocity(model: Backbone, state, duration: float | None = None) -> VelocityPrediction:
    """Backbone velocity for one ``SystemState``; with ``duration`` also ``x + v_hat*T``."""
    x, v, g = _state_inputs(state)
    v_hat = model.velocity(x, v, g).data
    x_next = None if duration is None else state.positions + v_hat * duration
    return VelocityPrediction(v_hat, x_next)


rf_velocity = egnn_velocity


def multilayer_forward(model: EGNN, state) -> VelocityPrediction:
    return egnn_velocity(model, state)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(model: Backbone, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write parameters as JSON: name -> {shape, data (flat, row-major)}."""
    tensors = {name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
               for name, t in model.named_parameters().items()}
    payload = {"format": CHECKPOINT_FORMAT, "model": model.config(), "tensors": tensors, "extra": extra or {}}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | os.PathLike) -> tuple[Backbone, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an nc-dyn checkpoint")
    cfg = payload["model"]
    options = {"norm_prefactor": cfg["norm_prefactor"]} if "norm_prefactor" in cfg else {}
    model = build_backbone(cfg["kind"], hidden=cfg["hidden"], layers=cfg.get("layers", 1),
                           layer_norm=cfg.get("layer_norm", True), **options)
    model.edge_attr_mean = cfg.get("edge_attr_mean", 0.0)
    model.edge_attr_std = cfg.get("edge_attr_std", 1.0)
    params = model.named_parameters()
    if set(params) != set(payload["tensors"]):
        raise ValueError(f"{path}: parameter names do not match a {cfg['kind']} backbone")
    for name, rec in payload["tensors"].items():
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        if arr.shape != params[name].shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {params[name].shape}")
        params[name].data = arr
    return model, payload.get("extra", {})
