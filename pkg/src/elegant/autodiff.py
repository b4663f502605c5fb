"""Small reverse-mode autodiff over float64 numpy arrays.

Nodes are evaluated eagerly as the graph is built. Only nodes that depend on
a gradient-carrying leaf keep references to their parents, so graphs built
purely from constants (sampling, evaluation) are released step by step.

Primitive set: add, sub, mul, scale, matvec, matmul, tanh, relu, sum,
square, concat, slice, plus ``field`` for vector fields whose
vector-Jacobian product is supplied by the caller (closed-form drifts).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "elegant.paramset"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible operand shapes {', '.join(map(str, shapes))}")


class GradientError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "op", "parents", "_fwd", "_vjp", "requires_grad")

    def __init__(self, value, op="const", parents=(), fwd=None, vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._fwd = fwd
        self._vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of it routes through the primitives below
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def const(value) -> Node:
    return Node(value)


def leaf(value, requires_grad=True) -> Node:
    """A gradient-carrying input (parameter or differentiated input)."""
    node = Node(np.array(value, dtype=np.float64), op="leaf", requires_grad=requires_grad)
    return node


def _make(op, parents, fwd, vjp) -> Node:
    value = fwd(*(p.value for p in parents))
    if any(p.requires_grad for p in parents):
        return Node(value, op, parents, fwd, vjp, True)
    return Node(value, op)


def _reduce_to(g, shape):
    """Sum a broadcast gradient back onto ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    lead = g.ndim - len(shape)
    return np.sum(g, axis=tuple(range(lead)))


def _check_broadcast(op, a, b):
    if a.shape == b.shape or b.shape == () or (len(b.shape) == 1 and len(a.shape) >= 1 and a.shape[-1:] == b.shape):
        return
    raise ShapeError(op, a.shape, b.shape)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a scalar or a row vector (bias)."""
    _check_broadcast("add", a, b)
    sb = b.shape
    return _make("add", (a, b), lambda x, y: x + y,
                 lambda g, v, out: (g, _reduce_to(g, sb)))


def sub(a: Node, b: Node) -> Node:
    _check_broadcast("sub", a, b)
    sb = b.shape
    return _make("sub", (a, b), lambda x, y: x - y,
                 lambda g, v, out: (g, -_reduce_to(g, sb)))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast("mul", a, b)
    sb = b.shape
    return _make("mul", (a, b), lambda x, y: x * y,
                 lambda g, v, out: (g * v[1], _reduce_to(g * v[0], sb)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make("scale", (a,), lambda x: x * c, lambda g, v, out: (g * c,))


def matvec(A: Node, x: Node) -> Node:
    if A.value.ndim != 2 or x.value.ndim != 1 or A.shape[1] != x.shape[0]:
        raise ShapeError("matvec", A.shape, x.shape)
    return _make("matvec", (A, x), lambda M, u: M @ u,
                 lambda g, v, out: (np.outer(g, v[1]), v[0].T @ g))


def matmul(A: Node, B: Node) -> Node:
    if A.value.ndim != 2 or B.value.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError("matmul", A.shape, B.shape)
    return _make("matmul", (A, B), lambda M, N: M @ N,
                 lambda g, v, out: (g @ v[1].T, v[0].T @ g))


def tanh(a: Node) -> Node:
    return _make("tanh", (a,), np.tanh, lambda g, v, out: (g * (1.0 - out * out),))


def relu(a: Node) -> Node:
    return _make("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, v, out: (g * (v[0] > 0),))


def square(a: Node) -> Node:
    return _make("square", (a,), lambda x: x * x, lambda g, v, out: (2.0 * g * v[0],))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = a.shape
    if axis is not None and not -len(shape) <= axis < len(shape):
        raise ShapeError("sum", shape, f"axis={axis}")

    def vjp(g, v, out):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", (a,), lambda x: np.sum(x, axis=axis), vjp)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = tuple(nodes)
    ref = nodes[0].shape
    ax = axis % len(ref)
    for n in nodes[1:]:
        if len(n.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(n.shape, ref)) if i != ax):
            raise ShapeError("concat", *(m.shape for m in nodes))
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def vjp(g, v, out):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(nodes)))

    return _make("concat", nodes, lambda *xs: np.concatenate(xs, axis=ax), vjp)


def slice(a: Node, index) -> Node:  # noqa: A001
    shape = a.shape
    try:
        a.value[index]
    except IndexError as exc:
        raise ShapeError("slice", shape, index) from exc

    def vjp(g, v, out):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", (a,), lambda x: x[index], vjp)


def field(x: Node, fn: Callable[[np.ndarray], np.ndarray],
          vjp_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], name: str = "field") -> Node:
    """Apply a fixed vector field ``fn`` with caller-supplied VJP ``vjp_fn(x, g)``."""
    return _make(name, (x,), fn, lambda g, v, out: (vjp_fn(v[0], g),))


def _topo(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def evaluate(root: Node) -> np.ndarray:
    """Recompute every tracked node from its parents and return the root's value."""
    for node in _topo(root):
        if node._fwd is not None:
            node.value = np.asarray(node._fwd(*(p.value for p in node.parents)), dtype=np.float64)
    return root.value


def backward(root: Node, seed: float = 1.0) -> None:
    """Accumulate d(seed * root)/d(leaf) into ``leaf.grad`` for every gradient leaf."""
    if root.value.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    grads = {id(root): np.full(root.shape, float(seed))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        pvals = tuple(p.value for p in node.parents)
        for parent, pg in zip(node.parents, node._vjp(g, pvals, node.value)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

@dataclass
class ParamSet:
    values: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.values = {k: np.array(a, dtype=np.float64) for k, a in self.values.items()}
        for k, a in self.values.items():
            self.m.setdefault(k, np.zeros_like(a))
            self.v.setdefault(k, np.zeros_like(a))
            if self.m[k].shape != a.shape or self.v[k].shape != a.shape:
                raise ShapeError("ParamSet", a.shape, self.m[k].shape, self.v[k].shape)

    def names(self) -> list[str]:
        return list(self.values)

    def leaves(self) -> dict[str, Node]:
        return {k: leaf(a) for k, a in self.values.items()}

    def constants(self) -> dict[str, Node]:
        return {k: const(a) for k, a in self.values.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: a.copy() for k, a in self.values.items()},
                        {k: a.copy() for k, a in self.m.items()},
                        {k: a.copy() for k, a in self.v.items()}, self.step)

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "params": [
                {"name": k, "shape": list(a.shape), "values": a.ravel().tolist(),
                 "adam_m": self.m[k].ravel().tolist(), "adam_v": self.v[k].ravel().tolist()}
                for k, a in self.values.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSet":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unrecognised checkpoint header {d.get('format')!r} v{d.get('version')!r}")
        vals, m, v = {}, {}, {}
        for rec in d["params"]:
            shape = tuple(rec["shape"])
            vals[rec["name"]] = np.array(rec["values"], dtype=np.float64).reshape(shape)
            m[rec["name"]] = np.array(rec["adam_m"], dtype=np.float64).reshape(shape)
            v[rec["name"]] = np.array(rec["adam_v"], dtype=np.float64).reshape(shape)
        return cls(vals, m, v, int(d["step"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "ParamSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_grads(nodes: dict[str, Node]) -> dict[str, np.ndarray]:
    return {k: (n.grad if n.grad is not None else np.zeros(n.shape)) for k, n in nodes.items()}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}, norm


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam update, applied in place."""
    if not lr > 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1) or not eps > 0:
        raise ValueError(f"bad Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {k!r}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = params.m[k] = beta1 * params.m[k] + (1.0 - beta1) * g
        v = params.v[k] = beta2 * params.v[k] + (1.0 - beta2) * g * g
        params.values[k] = params.values[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out


__all__ = [
    "Node", "ShapeError", "GradientError", "ParamSet", "const", "leaf", "add", "sub", "mul",
    "scale", "matvec", "matmul", "tanh", "relu", "sum", "square", "concat", "slice", "field",
    "evaluate", "backward", "collect_grads", "global_norm", "clip_by_global_norm", "adam_step",
    "numeric_grad",
]
