"""Small reverse-mode autodiff over numpy arrays, plus AdamW.

Ops run eagerly. When a :class:`Graph` is active (``with Graph() as g:``) and
at least one input requires a gradient, the op is recorded on it so that
``g.backward(root)`` can push gradients back in reverse recording order.
Outside a graph the same functions act as plain numpy kernels, which is what
sampling and evaluation use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "matmul", "add", "mul", "concat", "silu", "relu", "sum", "mean", "mse",
    "cosine_similarity", "abs", "scale", "index_rows", "sinusoid_embed",
)

COS_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    """Dense float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> list[int]:
        return list(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def const(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, dtype=dtype)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE: list["Graph"] = []


class Graph:
    """Tape of recorded ops. Nodes are appended in execution order, so the
    list is already topologically sorted."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _check_finite(kind: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"{kind}: non-finite value in output")


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check_finite(kind, out)
    needs = any(t.requires_grad for t in inputs)
    t = Tensor(out, requires_grad=needs, dtype=out.dtype)
    g = active_graph()
    if needs and g is not None:
        t._graph = g
        g.nodes.append(Node(kind, tuple(inputs), t, vjp))
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(extra)), dtype=np.float64) if extra > 0 else grad
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.astype(grad.dtype).reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- ops -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def vjp(g):
        ga = g @ B.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.outer(A, g) if A.ndim == 1 else A.T @ g
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    out = a.data + b.data
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    out = A * B
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, vjp)


def silu(x: Tensor) -> Tensor:
    X = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * X))
    out = X * sig
    return _record("silu", (x,), out, lambda g: (g * (sig * (1.0 + X * (1.0 - sig))),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), x.data * mask, lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    sign = np.sign(x.data)
    return _record("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    dt = x.data.dtype
    return _record("scale", (x,), (x.data * c).astype(dt, copy=False),
                   lambda g: ((g * c).astype(dt, copy=False),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    dt, shape = x.data.dtype, x.data.shape
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64)).astype(dt)
    oshape = out.shape

    def vjp(g):
        g = g.reshape(oshape)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(dt),)

    return _record("sum", (x,), out, vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    dt, shape = x.data.dtype, x.data.shape
    n = x.data.size if axis is None else shape[axis]
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64) / n).astype(dt)
    oshape = out.shape

    def vjp(g):
        g = g.reshape(oshape)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(dt),)

    return _record("mean", (x,), out, vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data.astype(np.float64) - target.data
    n = diff.size
    dt = pred.data.dtype
    out = np.asarray((diff * diff).sum() / n).astype(dt)

    def vjp(g):
        gp = (2.0 * float(g.reshape(-1)[0]) / n) * diff
        return gp.astype(dt), (-gp).astype(target.data.dtype)

    return _record("mse", (pred, target), out, vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine between two vectors, eps added to each norm."""
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity: needs equal 1-D shapes, got {a.shape} and {b.shape}")
    A = a.data.astype(np.float64)
    B = b.data.astype(np.float64)
    na = math.sqrt(float(A @ A)) + COS_EPS
    nb = math.sqrt(float(B @ B)) + COS_EPS
    dot = float(A @ B)
    c = dot / (na * nb)
    dt = a.data.dtype
    raw_na, raw_nb = na - COS_EPS, nb - COS_EPS

    def vjp(g):
        s = float(g.reshape(-1)[0])
        # d(dot/(na nb))/dA = B/(na nb) - dot/(na^2 nb) * A/|A|
        ga = B / (na * nb) - (dot / (na * na * nb)) * (A / raw_na if raw_na > 0 else 0.0)
        gb = A / (na * nb) - (dot / (na * nb * nb)) * (B / raw_nb if raw_nb > 0 else 0.0)
        return (s * ga).astype(dt), (s * gb).astype(b.data.dtype)

    return _record("cosine_similarity", (a, b), np.array([c], dtype=dt), vjp)


def index_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"index_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"index_rows: ids out of range for table {table.shape}")
    shape = table.data.shape
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("index_rows", (table,), out, vjp)


def sinusoid_table(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sinusoid_embed(t, dim: int, dtype=np.float32) -> Tensor:
    """Fixed sinusoidal embedding of integer timesteps, shape [n, dim].
    Constant w.r.t. every parameter, so nothing is recorded."""
    if dim % 2:
        raise ShapeError(f"sinusoid_embed: dim must be even, got {dim}")
    return const(sinusoid_table(t, dim), dtype=dtype)


# --- backward --------------------------------------------------------------

def backward(graph: Graph, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient and feeds root."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root._graph is not graph:
        raise ValueError("backward: root was not produced on this graph")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    leaves: dict[int, Tensor] = {}
    for node in graph.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp._graph is None:
                leaves[id(inp)] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0

    @classmethod
    def for_param(cls, p: Tensor, **kw) -> "AdamWState":
        return cls(np.zeros_like(p.data), np.zeros_like(p.data), **kw)

    def __post_init__(self):
        if self.lr <= 0 or not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError(f"bad AdamW hyperparameters lr={self.lr} betas=({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError(f"bad AdamW eps={self.eps} weight_decay={self.weight_decay}")


def adamw_step(params: Sequence[Tensor], states: Sequence[AdamWState]) -> None:
    """One decoupled-weight-decay Adam update with bias correction. Grads are
    left in place."""
    if len(params) != len(states):
        raise ValueError(f"adamw_step: {len(params)} params but {len(states)} states")
    for p in params:
        if p.grad is None:
            raise ValueError(f"adamw_step: parameter {p!r} has no grad")
    for p, s in zip(params, states):
        if s.m.shape != p.data.shape:
            raise ShapeError(f"adamw_step: state shape {s.m.shape} does not match param {p.shape}")
        s.step += 1
        g = p.grad
        s.m *= s.beta1
        s.m += (1 - s.beta1) * g
        s.v *= s.beta2
        s.v += (1 - s.beta2) * (g * g)
        bc1 = 1 - s.beta1 ** s.step
        bc2 = 1 - s.beta2 ** s.step
        upd = (s.m / bc1) / (np.sqrt(s.v / bc2) + s.eps)
        if s.weight_decay:
            p.data *= 1 - s.lr * s.weight_decay
        p.data -= (s.lr * upd).astype(p.data.dtype)
        _check_finite("adamw_step", p.data)


def make_states(params: Sequence[Tensor], **kw) -> list[AdamWState]:
    return [AdamWState.for_param(p, **kw) for p in params]


FORWARD = {
    "matmul": matmul, "add": add, "mul": mul, "concat": concat, "silu": silu,
    "relu": relu, "sum": sum_, "mean": mean, "mse": mse,
    "cosine_similarity": cosine_similarity, "abs": abs_, "scale": scale,
    "index_rows": index_rows, "sinusoid_embed": sinusoid_embed,
}


def forward_op(kind: str, *inputs, **kw) -> Tensor:
    """Dispatch by op name; unknown kinds are rejected."""
    try:
        fn = FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; allowed: {', '.join(OP_KINDS)}") from None
    return fn(*inputs, **kw)
