"""Feed-forward networks on top of the autodiff module, plus a regression trainer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet

log = logging.getLogger(__name__)

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


def init_mlp(sizes: Sequence[int], seed: int, zero_last: bool = False) -> ParamSet:
    rng = np.random.default_rng(seed)
    values = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            values[f"W{i}"] = np.zeros((fan_in, fan_out))
        else:
            values[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        values[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(values)


def mlp_graph(p: dict[str, Node], x: Node, n_layers: int, activation: str = "tanh") -> Node:
    act = ACTIVATIONS[activation]
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, p[f"W{i}"]), p[f"b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass
class MLP:
    """R^n_in -> R^n_out network; inputs are (batch, n_in) arrays."""

    sizes: tuple[int, ...]
    params: ParamSet
    activation: str = "tanh"

    @classmethod
    def create(cls, n_in: int, hidden: Sequence[int], n_out: int, seed: int,
               activation: str = "tanh", zero_last: bool = False) -> "MLP":
        sizes = (n_in, *hidden, n_out)
        return cls(sizes, init_mlp(sizes, seed, zero_last), activation)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def graph(self, x: Node, nodes: dict[str, Node] | None = None) -> Node:
        if nodes is None:
            nodes = self.params.constants()
        return mlp_graph(nodes, x, self.n_layers, self.activation)

    def __call__(self, x) -> np.ndarray:
        return self.graph(ad.const(np.atleast_2d(x))).value

    def input_grad(self, x, output_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Values and d out[:, output_index] / d x, row by row."""
        xn = ad.leaf(np.atleast_2d(x))
        out = self.graph(xn)
        col = ad.slice(out, (np.s_[:], output_index))
        ad.backward(ad.sum(col))
        return col.value, xn.grad


@dataclass
class FitLog:
    losses: list[float] = field(default_factory=list)
    holdout_mse: float | None = None


def fit_regression(net: MLP, X: np.ndarray, y: np.ndarray, *, epochs: int = 200, batch: int = 128,
                   lr: float = 3e-3, seed: int = 0, clip: float | None = 5.0,
                   holdout: float = 0.0, final_lr_frac: float = 1.0) -> FitLog:
    """Mean-squared-error fit of ``net`` to ``y`` with minibatch Adam, in place.

    The step size follows a cosine schedule from ``lr`` to ``final_lr_frac * lr``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(len(X), -1)
    if len(X) == 0:
        raise ValueError("empty regression dataset")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("regression inputs contain non-finite values")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(X))
    n_hold = int(round(holdout * len(X))) if len(X) > 1 else 0
    hold, train = idx[:n_hold], idx[n_hold:]
    fitlog = FitLog()
    batch = min(batch, len(train))
    for epoch in range(epochs):
        frac = epoch / max(epochs - 1, 1)
        lr_t = lr * (final_lr_frac + (1 - final_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
        order = rng.permutation(train)
        total = 0.0
        for start in range(0, len(order), batch):
            sel = order[start:start + batch]
            nodes = net.params.leaves()
            pred = net.graph(ad.const(X[sel]), nodes)
            resid = ad.sub(pred, ad.const(y[sel]))
            loss = ad.scale(ad.sum(ad.square(resid)), 1.0 / resid.value.size)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"regression diverged at epoch {epoch}")
            ad.backward(loss)
            grads, _ = ad.clip_by_global_norm(ad.collect_grads(nodes), clip)
            ad.adam_step(net.params, grads, lr=lr_t)
            total += float(loss.value) * len(sel)
        fitlog.losses.append(total / len(order))
    if n_hold:
        fitlog.holdout_mse = float(np.mean((net(X[hold]) - y[hold]) ** 2))
    log.debug("regression done: final loss %.3e", fitlog.losses[-1] if fitlog.losses else float("nan"))
    return fitlog
