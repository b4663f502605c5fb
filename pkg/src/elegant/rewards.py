"""Reward functions, nominal-reward fitting and the exponentially tilted target."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Node
from .nets import MLP, FitLog, fit_regression
from .pretrained import GaussianMixture

log = logging.getLogger(__name__)


class Reward:
    """x (B, d) -> r (B,). Subclasses give values, gradients and a graph form."""

    kind = "abstract"

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def graph(self, x: Node) -> Node:
        raise NotImplementedError(f"{type(self).__name__} cannot be recorded into a graph")


@dataclass
class LinearReward(Reward):
    b: np.ndarray
    c: float = 0.0
    kind = "linear"

    def __post_init__(self):
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))

    def __call__(self, x):
        return np.atleast_2d(x) @ self.b + self.c

    def grad(self, x):
        return np.broadcast_to(self.b, np.atleast_2d(x).shape).copy()

    def graph(self, x):
        return ad.add(ad.matvec(x, ad.const(self.b)), ad.const(self.c))

    @property
    def is_constant(self) -> bool:
        return not np.any(self.b)


def constant_reward(c: float, dim: int = 1) -> LinearReward:
    return LinearReward(np.zeros(dim), c)


@dataclass
class QuadraticReward(Reward):
    """sum_i a_i x_i^2 + b.x + c with a_i <= 0."""

    a: np.ndarray
    b: np.ndarray
    c: float = 0.0
    kind = "quadratic"

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if np.any(self.a > 0):
            raise ValueError("quadratic reward needs a negative-semidefinite diagonal")

    def __call__(self, x):
        x = np.atleast_2d(x)
        return (x * x) @ self.a + x @ self.b + self.c

    def grad(self, x):
        x = np.atleast_2d(x)
        return 2 * x * self.a + self.b

    def graph(self, x):
        quad = ad.matvec(ad.square(x), ad.const(self.a))
        return ad.add(ad.add(quad, ad.matvec(x, ad.const(self.b))), ad.const(self.c))


@dataclass
class NetReward(Reward):
    net: MLP
    kind = "net"

    def __call__(self, x):
        return self.net(np.atleast_2d(x))[:, 0]

    def grad(self, x):
        return self.net.input_grad(np.atleast_2d(x))[1]

    def graph(self, x):
        return ad.slice(self.net.graph(x), (np.s_[:], 0))


@dataclass
class BumpReward(Reward):
    """-|x - center|^2 plus Gaussian bumps h * exp(-|x - c|^2 / (2 w^2)).

    Used as the ground-truth ("genuine") reward; it is never differentiated
    through a graph.
    """

    center: np.ndarray
    bumps: Sequence[tuple] = ()
    kind = "bump"

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        self.bumps = [(np.atleast_1d(np.asarray(c, dtype=np.float64)), float(h), float(w))
                      for c, h, w in self.bumps]

    def __call__(self, x):
        x = np.atleast_2d(x)
        out = -np.sum((x - self.center) ** 2, axis=1)
        for c, h, w in self.bumps:
            out = out + h * np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * w * w))
        return out

    def grad(self, x):
        x = np.atleast_2d(x)
        g = -2 * (x - self.center)
        for c, h, w in self.bumps:
            e = h * np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * w * w))
            g = g - e[:, None] * (x - c) / (w * w)
        return g


def default_genuine_reward() -> BumpReward:
    return BumpReward(center=[2.0], bumps=[([-2.0], 1.0, 0.5)])


# ---------------------------------------------------------------------------
# nominal reward fitting
# ---------------------------------------------------------------------------

@dataclass
class NominalFitConfig:
    hidden: tuple[int, ...] = (32, 32)
    epochs: int = 300
    batch: int = 128
    lr: float = 3e-3
    seed: int = 0
    holdout: float = 0.2


def fit_nominal_reward(X, y, cfg: NominalFitConfig | None = None) -> tuple[NetReward, FitLog]:
    """Least-squares fit of a network reward to labelled samples (x, r*(x))."""
    cfg = cfg or NominalFitConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("nominal-reward dataset is empty")
    net = MLP.create(X.shape[1], cfg.hidden, 1, seed=cfg.seed)
    holdout = cfg.holdout if len(X) >= 5 else 0.0
    fitlog = fit_regression(net, X, y, epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr,
                            seed=cfg.seed, holdout=holdout)
    log.info("nominal reward fit: train loss %.3e, held-out MSE %s", fitlog.losses[-1], fitlog.holdout_mse)
    return NetReward(net), fitlog


def truncated_dataset(data: GaussianMixture, genuine: Reward, n: int, seed: int,
                      upper: float | None = None, component: int | None = None):
    """Labelled samples from p_data restricted to x_1 <= upper and/or one component."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < n:
        if component is not None:
            sub = GaussianMixture(np.ones(1), data.means[[component]], data.variances[[component]])
            x = sub.sample(2 * n, rng)
        else:
            x = data.sample(2 * n, rng)
        if upper is not None:
            x = x[x[:, 0] <= upper]
        out.append(x)
    X = np.concatenate(out)[:n]
    return X, genuine(X)


# ---------------------------------------------------------------------------
# tilted target
# ---------------------------------------------------------------------------

class GridTooSmall(ValueError):
    pass


def simpson_weights(n: int, h: float) -> np.ndarray:
    if n % 2 == 0:
        raise ValueError("Simpson's rule needs an odd number of points")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


@dataclass(frozen=True)
class QuadGrid:
    points: np.ndarray  # (M, d)
    weights: np.ndarray  # (M,)
    shape: tuple[int, ...]

    @classmethod
    def line(cls, lo: float = -10.0, hi: float = 10.0, n: int = 4001) -> "QuadGrid":
        x = np.linspace(lo, hi, n)
        return cls(x[:, None], simpson_weights(n, x[1] - x[0]), (n,))

    @classmethod
    def square(cls, lo: float = -8.0, hi: float = 8.0, n: int = 401) -> "QuadGrid":
        x = np.linspace(lo, hi, n)
        w = simpson_weights(n, x[1] - x[0])
        X, Y = np.meshgrid(x, x, indexing="ij")
        return cls(np.stack([X.ravel(), Y.ravel()], axis=1), np.outer(w, w).ravel(), (n, n))

    @classmethod
    def default(cls, dim: int) -> "QuadGrid":
        if dim == 1:
            return cls.line()
        if dim == 2:
            return cls.square()
        raise ValueError("quadrature grids are provided for d = 1 and d = 2 only")

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def edge_mass(self, values, frac: float = 0.02) -> float:
        """Mass in the outer band of the grid, the proxy for truncated tails."""
        mask = np.zeros(self.shape, dtype=bool)
        for ax, n in enumerate(self.shape):
            k = max(1, int(frac * n))
            idx = [np.s_[:]] * len(self.shape)
            idx[ax] = np.s_[:k]
            mask[tuple(idx)] = True
            idx[ax] = np.s_[-k:]
            mask[tuple(idx)] = True
        return float(np.dot(self.weights, values * mask.ravel()))


@dataclass
class TiltedTarget:
    """p_tar(x) = exp(r(x)/alpha) p_data(x) / C_tar."""

    data: GaussianMixture
    reward: Reward
    alpha: float
    grid: QuadGrid | None = None
    mixture: GaussianMixture | None = field(default=None, init=False)
    log_normalizer: float = field(default=np.nan, init=False)
    _grid_density: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if isinstance(self.reward, LinearReward):
            b, a = self.reward.b, self.alpha
            logits = (np.log(self.data.weights) + self.data.means @ b / a
                      + (b @ b) * self.data.variances / (2 * a * a))
            lz = logsumexp(logits)
            self.mixture = GaussianMixture(np.exp(logits - lz),
                                           self.data.means + np.outer(self.data.variances, b) / a,
                                           self.data.variances)
            self.log_normalizer = float(lz + self.reward.c / a)
        else:
            grid = self.grid or QuadGrid.default(self.data.dim)
            object.__setattr__(self, "grid", grid)
            logu = self.reward(grid.points) / self.alpha + self.data.log_density(grid.points)
            shift = logu.max()
            unnorm = np.exp(logu - shift)
            z = grid.integrate(unnorm)
            dens = unnorm / z
            tail = grid.edge_mass(dens)
            if tail > 1e-6:
                raise GridTooSmall(f"target mass {tail:.2e} near the grid boundary; extend the quadrature grid")
            self._grid_density = dens
            self.log_normalizer = float(np.log(z) + shift)

    @property
    def closed_form(self) -> bool:
        return self.mixture is not None

    def density(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.mixture is not None:
            return self.mixture.density(x)
        return np.exp(self.reward(x) / self.alpha + self.data.log_density(x) - self.log_normalizer)

    def grid_density(self, grid: QuadGrid | None = None) -> tuple[QuadGrid, np.ndarray]:
        if grid is None:
            grid = self.grid or QuadGrid.default(self.data.dim)
        if self._grid_density is not None and grid is self.grid:
            return grid, self._grid_density
        return grid, self.density(grid.points)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.mixture is None:
            raise NotImplementedError("sampling is available for the closed-form (linear reward) target")
        return self.mixture.sample(n, rng)

    def cdf(self, x) -> np.ndarray:
        if self.mixture is not None:
            return self.mixture.cdf(x)
        grid, dens = self.grid_density()
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid.points[:, 0]))])
        return np.interp(np.asarray(x).reshape(-1), grid.points[:, 0], cum / cum[-1])

    def expectation(self, g) -> float:
        grid, dens = self.grid_density()
        return grid.integrate(g(grid.points) * dens)


def target_density(tilt: TiltedTarget, x) -> np.ndarray:
    return tilt.density(x)


def kl_between_densities(p, q, weights) -> float:
    """Quadrature of p log(p/q) on a shared grid."""
    p, q, weights = (np.asarray(a, dtype=np.float64) for a in (p, q, weights))
    pos = p > 0
    if np.any(q[pos] <= 0):
        raise ValueError("KL support violation: q vanishes where p has mass")
    return float(np.dot(weights[pos], p[pos] * (np.log(p[pos]) - np.log(q[pos]))))
