"""Exact "pretrained" diffusion: a Gaussian mixture under the VP/OU forward process.

Forward process: dy = -0.5 y ds + dw, so y_s | y_0 ~ N(e^{-s/2} y_0, 1 - e^{-s}).
The generative SDE runs x_t = y_{T-t} with drift 0.5 x + grad log Q_{T-t}(x),
unit diffusion, started from N(0, I).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtr, softmax

from .sde import SdeSpec, TimeGrid, simulate_batch


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians: weights (K,), means (K, d), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        v = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not (len(w) == len(mu) == len(v)):
            raise ValueError("weights, means and variances must have the same number of components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1 (sum={w.sum()!r})")
        if np.any(v <= 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "GaussianMixture":
        w = np.array([r["weight"] for r in records], dtype=np.float64)
        return cls(w / w.sum() if abs(w.sum() - 1) < 1e-9 else w,
                   np.array([np.atleast_1d(r["mean"]) for r in records], dtype=np.float64),
                   np.array([r["variance"] for r in records], dtype=np.float64))

    def to_records(self) -> list[dict]:
        return [{"weight": float(w), "mean": [float(m) for m in mu], "variance": float(v)}
                for w, mu, v in zip(self.weights, self.means, self.variances)]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _component_logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        d = self.dim
        sq = np.sum((x[:, None, :] - self.means[None]) ** 2, axis=-1)
        return -0.5 * sq / self.variances - 0.5 * d * np.log(2 * np.pi * self.variances)

    def log_density(self, x) -> np.ndarray:
        return logsumexp(self._component_logpdf(x) + np.log(self.weights), axis=1)

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def responsibilities(self, x) -> np.ndarray:
        return softmax(self._component_logpdf(x) + np.log(self.weights), axis=1)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        pi = self.responsibilities(x)
        g = -(x[:, None, :] - self.means[None]) / self.variances[None, :, None]
        return np.einsum("bk,bkd->bd", pi, g)

    def score_vjp(self, x, v) -> np.ndarray:
        """v^T Hess(log density), which is symmetric, row by row."""
        x = np.atleast_2d(x)
        pi = self.responsibilities(x)
        g = -(x[:, None, :] - self.means[None]) / self.variances[None, :, None]
        s = np.einsum("bk,bkd->bd", pi, g)
        gv = np.einsum("bkd,bd->bk", g, v)
        return (-v * np.sum(pi / self.variances, axis=1, keepdims=True)
                + np.einsum("bk,bkd->bd", pi * gv, g)
                - np.sum(s * v, axis=1, keepdims=True) * s)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cdf(self, x) -> np.ndarray:
        if self.dim != 1:
            raise ValueError("cdf is defined for one-dimensional mixtures only")
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        z = (x[:, None] - self.means[None, :, 0]) / np.sqrt(self.variances)[None]
        return ndtr(z) @ self.weights

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.dim))

    def project(self, direction) -> "GaussianMixture":
        """Law of <direction, X> for a unit vector."""
        u = np.asarray(direction, dtype=np.float64)
        return GaussianMixture(self.weights, self.means @ u, self.variances * float(u @ u))


def standard_normal(dim: int = 1) -> GaussianMixture:
    return GaussianMixture(np.ones(1), np.zeros((1, dim)), np.ones(1))


def forward_marginal(gm: GaussianMixture, s: float) -> GaussianMixture:
    if s < 0:
        raise ValueError("forward time must be non-negative")
    a2 = np.exp(-s)
    return GaussianMixture(gm.weights, np.exp(-0.5 * s) * gm.means, a2 * gm.variances + (1.0 - a2))


def posterior_params(gm: GaussianMixture, s: float, x):
    """Batched posterior of y_0 given y_s = x.

    Returns (weights (B, K), means (B, K, d), variances (K,)).
    """
    if not s > 0:
        raise ValueError("posterior is degenerate at s = 0 (point mass at x)")
    x = np.atleast_2d(x)
    a = np.exp(-0.5 * s)
    beta = -np.expm1(-s)
    post_var = 1.0 / (1.0 / gm.variances + a * a / beta)
    means = post_var[None, :, None] * (gm.means[None] / gm.variances[None, :, None] + a * x[:, None, :] / beta)
    w = forward_marginal(gm, s).responsibilities(x)
    return w, means, post_var


@dataclass(frozen=True)
class PretrainedModel:
    data: GaussianMixture
    horizon: float = 5.0

    @property
    def dim(self) -> int:
        return self.data.dim

    def sigma(self, t: float) -> float:
        return 1.0

    def marginal(self, t: float) -> GaussianMixture:
        """Q_{T-t}: the law of x_t when the process starts from Q_T."""
        return forward_marginal(self.data, max(self.horizon - t, 0.0))

    def reverse_drift(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return 0.5 * x + self.marginal(t).score(x)

    def reverse_drift_vjp(self, t: float, x, g) -> np.ndarray:
        return 0.5 * g + self.marginal(t).score_vjp(x, g)

    def spec(self) -> SdeSpec:
        return SdeSpec(self.reverse_drift, self.sigma, self.dim, self.reverse_drift_vjp)

    def grid(self, n_steps: int = 100) -> TimeGrid:
        return TimeGrid(0.0, self.horizon, n_steps)

    def initial_sampler(self):
        d = self.dim

        def draw(n, seed):
            return np.random.default_rng(seed).standard_normal((n, d))

        return draw

    def initial_density(self, x) -> np.ndarray:
        return standard_normal(self.dim).density(x)

    def sample(self, n: int, seed: int, n_steps: int = 100):
        return simulate_batch(self.spec(), self.initial_sampler(), self.grid(n_steps), seed, n)

    def posterior_data_given_state(self, s: float, x) -> GaussianMixture:
        w, m, v = posterior_params(self.data, s, np.atleast_1d(x)[None])
        return GaussianMixture(w[0] / w[0].sum(), m[0], v)

    def pdata_density(self, x) -> np.ndarray:
        return self.data.density(x)


def reverse_drift(model: PretrainedModel, t: float, x) -> np.ndarray:
    return model.reverse_drift(t, x)


def score(gm: GaussianMixture, x) -> np.ndarray:
    return gm.score(x)


def pdata_density(model: PretrainedModel, x) -> np.ndarray:
    return model.pdata_density(x)


def posterior_data_given_state(model: PretrainedModel, s: float, x) -> GaussianMixture:
    return model.posterior_data_given_state(s, x)


def canonical_mixture() -> GaussianMixture:
    """Equal-weight 1-D mixture at -2 and +2 with variance 0.25."""
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[-2.0], [2.0]]), np.array([0.25, 0.25]))
