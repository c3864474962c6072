"""Minimal reverse-mode autodiff over dense float64 arrays.

A Tape records nodes in creation order, which is already topological.
The operator set is closed: matmul, add, mul, relu, sigmoid, embed,
masked_mean_pool, masked_mse_loss, masked_mae_loss. Masks and integer
ids are op attributes, not differentiable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import NonScalarLoss, ShapeError, UnknownOp

OPS = (
    "matmul",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "embed",
    "masked_mean_pool",
    "masked_mse_loss",
    "masked_mae_loss",
)


class Parameter:
    """A named trainable array with its gradient buffer."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    grad: Optional[np.ndarray] = None
    param: Optional[Parameter] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing leading axes."""
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def _leading_broadcast(a: tuple, b: tuple) -> tuple:
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"shapes {a} and {b} do not broadcast over leading axes")
    return big


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, inputs, value, attrs=None, param=None) -> Node:
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), value, attrs or {}, None, param)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1)
        return self._push("const", (), value)

    def param(self, p: Parameter) -> Node:
        return self._push("param", (), p.value, param=p)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        fn = _FORWARD.get(op)
        if fn is None:
            raise UnknownOp(op)
        value = fn(*(n.value for n in inputs), **attrs)
        return self._push(op, inputs, value, attrs)

    # sugar
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def relu(self, a):
        return self.apply("relu", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def embed(self, table, ids):
        return self.apply("embed", table, ids=np.asarray(ids, dtype=np.int64))

    def masked_mean_pool(self, x, mask):
        return self.apply("masked_mean_pool", x, mask=np.asarray(mask, dtype=bool))

    def masked_mse_loss(self, pred, target, mask):
        return self.apply("masked_mse_loss", pred, target=np.asarray(target, dtype=np.float64), mask=np.asarray(mask, dtype=bool))

    def masked_mae_loss(self, pred, target, mask):
        return self.apply("masked_mae_loss", pred, target=np.asarray(target, dtype=np.float64), mask=np.asarray(mask, dtype=bool))


def forward_eval(tape: Tape, op: str, inputs: Iterable[Node], **attrs) -> Node:
    return tape.apply(op, *inputs, **attrs)


# ---------------------------------------------------------------------------
# forward rules


def _f_matmul(a, b):
    if not (1 <= a.ndim <= 3 and 1 <= b.ndim <= 3):
        raise ShapeError(f"matmul supports rank 1-3, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 3 and a.ndim != 3:
        raise ShapeError(f"batched right operand needs a batched left operand: {a.shape} @ {b.shape}")
    if a.ndim == 1 and b.ndim == 1:
        return np.array([a @ b])  # dot product, kept at shape (1,) like every scalar
    return np.matmul(a, b)


def _f_add(a, b):
    _leading_broadcast(a.shape, b.shape)
    return a + b


def _f_mul(a, b):
    _leading_broadcast(a.shape, b.shape)
    return a * b


def _f_relu(a):
    return np.maximum(a, 0.0)


def _f_embed(table, ids):
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids outside [0, {table.shape[0]})")
    return table[ids]


def _pool_parts(x, mask):
    if x.ndim not in (2, 3) or mask.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean_pool expects x (.., N, d) with mask (.., N); got {x.shape}, {mask.shape}")
    count = np.maximum(mask.sum(axis=-1, keepdims=True), 1).astype(np.float64)
    return mask[..., None].astype(np.float64), count


def _f_pool(x, mask):
    m, count = _pool_parts(x, mask)
    return (x * m).sum(axis=-2) / count


def _loss_parts(pred, target, mask):
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"loss shapes differ: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    return max(1, int(mask.sum()))


def _f_mse(pred, target, mask):
    n = _loss_parts(pred, target, mask)
    d = np.where(mask, pred - target, 0.0)
    return np.array([np.sum(d * d) / n])


def _f_mae(pred, target, mask):
    n = _loss_parts(pred, target, mask)
    return np.array([np.sum(np.abs(np.where(mask, pred - target, 0.0))) / n])


_FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "mul": _f_mul,
    "relu": _f_relu,
    "sigmoid": _sigmoid,
    "embed": _f_embed,
    "masked_mean_pool": _f_pool,
    "masked_mse_loss": _f_mse,
    "masked_mae_loss": _f_mae,
}


# ---------------------------------------------------------------------------
# vector-Jacobian products


def _v_matmul(g, node, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g[0] * b, g[0] * a
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if b.ndim == 1:
        g2 = g2[..., None]
    if a.ndim == 1:
        g2 = g2[..., None, :]
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    ga = _sum_to(ga, a2.shape).reshape(a.shape)
    gb = _sum_to(gb, b2.shape).reshape(b.shape)
    return ga, gb


def _v_add(g, node, a, b):
    return _sum_to(g, a.shape), _sum_to(g, b.shape)


def _v_mul(g, node, a, b):
    return _sum_to(g * b, a.shape), _sum_to(g * a, b.shape)


def _v_relu(g, node, a):
    return (np.where(a > 0, g, 0.0),)


def _v_sigmoid(g, node, a):
    s = node.value
    return (g * s * (1.0 - s),)


def _v_embed(g, node, table):
    gt = np.zeros_like(table)
    ids = node.attrs["ids"]
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _v_pool(g, node, x):
    m, count = _pool_parts(x, node.attrs["mask"])
    return (np.expand_dims(g / count, -2) * m,)


def _v_mse(g, node, pred):
    mask, target = node.attrs["mask"], node.attrs["target"]
    n = _loss_parts(pred, target, mask)
    return (np.where(mask, 2.0 * (pred - target) / n, 0.0) * g[0],)


def _v_mae(g, node, pred):
    mask, target = node.attrs["mask"], node.attrs["target"]
    n = _loss_parts(pred, target, mask)
    return (np.where(mask, np.sign(pred - target) / n, 0.0) * g[0],)


_BACKWARD: dict[str, Callable] = {
    "matmul": _v_matmul,
    "add": _v_add,
    "mul": _v_mul,
    "relu": _v_relu,
    "sigmoid": _v_sigmoid,
    "embed": _v_embed,
    "masked_mean_pool": _v_pool,
    "masked_mse_loss": _v_mse,
    "masked_mae_loss": _v_mae,
}


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; accumulates into Parameter.grad.

    Returns the gradient of every parameter reached, keyed by name.
    """
    if loss.value.shape != (1,):
        raise NonScalarLoss(f"loss must have shape (1,), got {loss.value.shape}")
    for n in tape.nodes:
        n.grad = None
    loss.grad = np.ones(1)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is None or not node.inputs:
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        grads = _BACKWARD[node.op](node.grad, node, *vals)
        for i, gi in zip(node.inputs, grads):
            src = tape.nodes[i]
            src.grad = gi if src.grad is None else src.grad + gi

    out: dict[str, np.ndarray] = {}
    for node in tape.nodes:
        if node.param is not None and node.grad is not None:
            node.param.grad = node.param.grad + node.grad
            out[node.param.name] = node.param.grad
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[Tape], Node],
    params: dict[str, Parameter],
    tolerance: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` builds the scalar loss on a fresh tape from the current
    parameter values. Relative error is |a - n| / max(1e-8, |a| + |n|).
    """
    for p in params.values():
        p.zero_grad()
    tape = Tape()
    backward(tape, loss_fn(tape))
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def f() -> float:
        return float(loss_fn(Tape()).value[0])

    per = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        a = analytic[name]
        rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
        per[name] = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max(per.values(), default=0.0), per, tolerance)
