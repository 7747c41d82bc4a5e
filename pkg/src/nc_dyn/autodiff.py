"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Tape` are appended to it as
nodes whose parents always have smaller indices, so the backward pass is a
single reverse sweep over the node list.  Outside a tape the same functions
only compute values, which is what evaluation code uses.

Broadcasting is never implicit.  Scalar-times-tensor goes through
:func:`scale`; the row-wise patterns a graph network needs (bias add,
per-row gating, gathers, grouped sums) are separate, explicitly named ops.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Mlp",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "layer_norm",
    "sum",
    "mean",
    "squared_norm",
    "scale",
    "concat",
    "linear",
    "mul_rows",
    "gather",
    "group_sum",
    "repeat_rows",
    "permute_rows",
    "row_norm",
    "sqrt",
    "reciprocal",
    "reshape",
    "mse_loss",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """A float64 array, optionally tracked by a tape.

    ``requires_grad`` marks leaves (parameters) whose gradient callers want.
    Tensors produced by ops inside a tape carry the tape and their node index.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, name: str | None = None) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple[int | None, ...], vjp: Callable | None):
        self.op = op
        self.parents = parents
        self.vjp = vjp


_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    Each thread has its own active-tape stack.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, t: Tensor) -> int | None:
        """Node index for ``t`` on this tape, registering parameters as leaves."""
        if t._tape is self:
            return t._node
        if not t.requires_grad:
            return None
        key = id(t)
        idx = self._leaves.get(key)
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._leaves[key] = idx
            self._leaf_refs.append(t)
        return idx

    def _record(self, op: str, value: np.ndarray, parents: tuple[int | None, ...], vjp: Callable) -> Tensor:
        out = Tensor(value, check=False)
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(op, parents, vjp))
        return out

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors that the loss does not depend on get an exact zero gradient.
        """
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar of shape () or (1,)")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if loss._tape is self:
            grads[loss._node] = np.ones_like(loss.data)
            for idx in range(loss._node, -1, -1):
                g = grads[idx]
                node = self.nodes[idx]
                if g is None or node.vjp is None:
                    continue
                for p, gp in zip(node.parents, node.vjp(g)):
                    if p is None or gp is None:
                        continue
                    prev = grads[p]
                    grads[p] = gp if prev is None else prev + gp
        out = []
        for t in wrt:
            idx = t._node if t._tape is self else self._leaves.get(id(t))
            g = grads[idx] if idx is not None else None
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, check=False)


def _make(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value``; record on the active tape when any input is differentiable."""
    tape = _active()
    if tape is None:
        return Tensor(value, check=False)
    parents = tuple(tape.index_of(t) for t in inputs)
    if all(p is None for p in parents):
        return Tensor(value, check=False)
    return tape._record(op, value, parents, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make("sqrt", out, (a,), vjp)


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data == 0):
        raise ValueError("reciprocal: zero input")
    out = 1.0 / a.data
    return _make("reciprocal", out, (a,), lambda g: (-g * out * out,))


def scale(a, s) -> Tensor:
    """``s * a`` where ``s`` is a Python float or a one-element tensor."""
    a = _as_tensor(a)
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ShapeError("scale", a.shape, s.shape, detail="factor must be a scalar")
        sv = s.data.reshape(())
        shp = s.shape
        ad = a.data
        return _make("scale", ad * sv, (a, s), lambda g: (g * sv, np.sum(g * ad).reshape(shp)))
    s = float(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with the bias row added to every row of the product."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _make("linear", out, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    b = _as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias must match output width")
    out += b.data
    return _make("linear", out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * np.mean(gx * xhat, axis=1, keepdims=True))
        return dx, np.sum(g * xhat, axis=0), g.sum(axis=0)

    return _make("layer_norm", out, (x, gain, bias), vjp)


# --- reductions -------------------------------------------------------------


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - op name
    """Sum of all entries (shape ``()``) or along ``axis`` keeping that dimension."""
    a = _as_tensor(a)
    shp = a.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shp).copy(),))
    out = a.data.sum(axis=axis, keepdims=True)
    return _make("sum", out, (a,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shp = a.shape
    n = a.data.size if axis is None else shp[axis]
    if n == 0:
        raise ShapeError("mean", shp, detail="empty reduction")
    if axis is None:
        return _make("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shp).copy(),))
    out = a.data.mean(axis=axis, keepdims=True)
    return _make("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shp).copy(),))


def squared_norm(a, axis: int | None = None) -> Tensor:
    """Sum of squares, over everything or along ``axis`` (kept as size 1)."""
    a = _as_tensor(a)
    ad = a.data
    if axis is None:
        out = np.asarray(np.sum(ad * ad))
    else:
        out = np.sum(ad * ad, axis=axis, keepdims=True)
    return _make("squared_norm", out, (a,), lambda g: (2.0 * g * ad,))


def row_norm(a) -> Tensor:
    """Euclidean norm of each row, shape ``(n, 1)``; gradient at a zero row is zero."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("row_norm", a.shape, detail="expects a matrix")
    ad = a.data
    nrm = np.sqrt(np.sum(ad * ad, axis=1, keepdims=True))

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(nrm > 0, ad / nrm, 0.0)
        return (g * unit,)

    return _make("row_norm", nrm, (a,), vjp)


# --- structural -------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    ax = axis % ts[0].data.ndim
    ref = list(ts[0].shape)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    shp = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", shp, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(shp),))


def mul_rows(a, c) -> Tensor:
    """Scale row ``i`` of ``a`` (n, m) by ``c[i]`` where ``c`` has shape (n, 1)."""
    a, c = _as_tensor(a), _as_tensor(c)
    if a.data.ndim != 2 or c.shape != (a.shape[0], 1):
        raise ShapeError("mul_rows", a.shape, c.shape)
    ad, cd = a.data, c.data
    return _make("mul_rows", ad * cd, (a, c), lambda g: (g * cd, np.sum(g * ad, axis=1, keepdims=True)))


def gather(a, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; the backward pass scatter-adds into the source rows."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
        raise ShapeError("gather", a.shape, index.shape, detail="row index out of range")
    shp = a.shape

    def vjp(g):
        out = np.zeros(shp)
        np.add.at(out, index, g)
        return (out,)

    return _make("gather", a.data[index], (a,), vjp)


def repeat_rows(a, times: int) -> Tensor:
    """Repeat each row ``times`` times consecutively: (n, m) -> (n*times, m)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or times <= 0:
        raise ShapeError("repeat_rows", a.shape, detail=f"cannot repeat rows {times} times")
    n, m = a.shape
    return _make("repeat_rows", np.repeat(a.data, times, axis=0), (a,),
                 lambda g: (g.reshape(n, times, m).sum(axis=1),))


def permute_rows(a, perm: np.ndarray) -> Tensor:
    """Rows ``a[perm]`` for a permutation ``perm`` of ``range(len(a))``."""
    a = _as_tensor(a)
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (a.shape[0],):
        raise ShapeError("permute_rows", a.shape, perm.shape)
    if not np.array_equal(np.sort(perm), np.arange(len(perm))):
        raise ValueError("permute_rows: index is not a permutation")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return _make("permute_rows", a.data[perm], (a,), lambda g: (g[inv],))


def group_sum(a, group: int) -> Tensor:
    """Sum consecutive blocks of ``group`` rows: (n*group, m) -> (n, m)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or group <= 0 or a.shape[0] % group:
        raise ShapeError("group_sum", a.shape, detail=f"rows not divisible into groups of {group}")
    n, m = a.shape[0] // group, a.shape[1]
    out = a.data.reshape(n, group, m).sum(axis=1)
    return _make("group_sum", out, (a,), lambda g: (np.repeat(g, group, axis=0),))


OP_KINDS = (
    "add", "sub", "mul", "matmul", "relu", "layer_norm", "sum", "squared_norm",
    "scale", "concat", "mean", "linear", "mul_rows", "gather", "group_sum",
    "repeat_rows", "permute_rows",
    "row_norm", "sqrt", "reciprocal", "reshape",
)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared elementwise differences."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    return scale(squared_norm(sub(pred, target)), 1.0 / max(pred.data.size, 1))


class Mlp:
    """Stack of linear layers with optional layer norm and ReLU between them.

    ``dims`` lists widths from input to output.  Hidden layers are
    ``linear -> [layer_norm] -> relu``; the last layer is linear, followed by
    the activation only when ``final_activation`` is set.
    """

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, layer_norm: bool = True,
                 activation: str = "relu", final_activation: bool = False, name: str = "mlp"):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.dims = list(dims)
        self.activation = activation
        self.final_activation = final_activation
        self.use_layer_norm = layer_norm
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.norm_gains: list[Tensor] = []
        self.norm_biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), f"{name}.w{i}"))
            self.biases.append(parameter(rng.uniform(-bound, bound, fan_out), f"{name}.b{i}"))
            if layer_norm and i < len(dims) - 2:
                self.norm_gains.append(parameter(np.ones(fan_out), f"{name}.ln{i}.gain"))
                self.norm_biases.append(parameter(np.zeros(fan_out), f"{name}.ln{i}.bias"))

    @property
    def activations(self) -> list[str]:
        return [self.activation] * (len(self.dims) - 2) + [self.activation if self.final_activation else "none"]

    def parameters(self) -> list[Tensor]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [w, b]
            if i < len(self.norm_gains):
                out += [self.norm_gains[i], self.norm_biases[i]]
        return out

    def __call__(self, x) -> Tensor:
        x = _as_tensor(x)
        if x.shape[-1] != self.dims[0]:
            raise ShapeError("mlp", x.shape, (self.dims[0],), detail="input width")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = linear(x, w, b)
            if i < last:
                if self.use_layer_norm:
                    x = layer_norm(x, self.norm_gains[i], self.norm_biases[i])
                if self.activation == "relu":
                    x = relu(x)
            elif self.final_activation and self.activation == "relu":
                x = relu(x)
        return x
