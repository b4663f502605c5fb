"""Estimating the soft value function at t = 0 from pretrained rollouts."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .nets import MLP, FitLog, fit_regression
from .pretrained import PretrainedModel
from .rewards import Reward
from .sde import TimeGrid, derive_seed, simulate_batch

log = logging.getLogger(__name__)

OVERFLOW_LIMIT = 700.0


@dataclass
class ValueDataset:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(self.x.shape[1])] + ["y"])
            for xi, yi in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
        return path

    @classmethod
    def from_csv(cls, path) -> "ValueDataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1])


@dataclass
class ValueModel:
    net: MLP
    log: FitLog

    def __call__(self, x) -> np.ndarray:
        return self.net(np.atleast_2d(x))[:, 0]

    def graph(self, x_node):
        from . import autodiff as ad
        return ad.slice(self.net.graph(x_node), (np.s_[:], 0))


@dataclass
class ValueFitConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 600
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0
    final_lr_frac: float = 0.1


def _probes(model: PretrainedModel, n: int, seed: int, probe_scale: float) -> np.ndarray:
    return np.sqrt(probe_scale) * model.initial_sampler()(n, derive_seed(seed, "probes"))


def generate_value_dataset(model: PretrainedModel, reward: Reward, n: int, grid: TimeGrid, seed: int,
                           probe_scale: float = 1.0) -> ValueDataset:
    """Pairs (x_0, r(x_T)) with x_0 ~ nu_ini and one pretrained rollout per x_0."""
    if n < 1:
        raise ValueError("need at least one sample")
    x0 = _probes(model, n, seed, probe_scale)
    tb = simulate_batch(model.spec(), x0, grid, derive_seed(seed, "rollouts"), n)
    y = reward(tb.terminal)
    return ValueDataset(x0, np.asarray(y, dtype=np.float64),
                        {"seed": seed, "n": n, "rollouts_per_probe": 1, "probe_scale": probe_scale})


def soft_value_targets(model: PretrainedModel, reward: Reward, alpha: float, x0: np.ndarray, n: int,
                       grid: TimeGrid, seed: int) -> np.ndarray:
    """alpha * log of the Monte Carlo mean of exp(r(x_T)/alpha), n rollouts per probe."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if n < 2:
        raise ValueError("need at least two rollouts per probe")
    m = len(x0)
    starts = np.repeat(x0, n, axis=0)
    tb = simulate_batch(model.spec(), starts, grid, derive_seed(seed, "soft-rollouts"), m * n)
    r = reward(tb.terminal).reshape(m, n)
    z = r / alpha
    if np.max(np.abs(z)) > OVERFLOW_LIMIT:
        raise OverflowError(f"|r|/alpha reaches {np.max(np.abs(z)):.1f}; increase alpha or rescale the reward")
    return alpha * (logsumexp(z, axis=1) - np.log(n))


def fit_value_mean(ds: ValueDataset, cfg: ValueFitConfig | None = None) -> ValueModel:
    """Regress r(x_T) on x_0; estimates v*_0 up to an additive constant."""
    cfg = cfg or ValueFitConfig()
    if len(ds) == 0:
        raise ValueError("empty value dataset")
    net = MLP.create(ds.x.shape[1], cfg.hidden, 1, seed=cfg.seed, zero_last=True)
    fitlog = fit_regression(net, ds.x, ds.y, epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr, seed=cfg.seed,
                            final_lr_frac=cfg.final_lr_frac)
    return ValueModel(net, fitlog)


def fit_value_soft(model: PretrainedModel, reward: Reward, alpha: float, m: int = 512, n: int = 128,
                   cfg: ValueFitConfig | None = None, grid: TimeGrid | None = None, seed: int = 0,
                   probe_scale: float = 1.0) -> tuple[ValueModel, ValueDataset]:
    """Regress the soft targets alpha*log-mean-exp(r/alpha) on the probes."""
    cfg = cfg or ValueFitConfig()
    grid = grid or model.grid()
    x0 = _probes(model, m, seed, probe_scale)
    y = soft_value_targets(model, reward, alpha, x0, n, grid, seed)
    ds = ValueDataset(x0, y, {"seed": seed, "n": m, "rollouts_per_probe": n, "alpha": alpha,
                              "probe_scale": probe_scale})
    net = MLP.create(model.dim, cfg.hidden, 1, seed=cfg.seed, zero_last=True)
    fitlog = fit_regression(net, x0, y, epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr, seed=cfg.seed,
                            final_lr_frac=cfg.final_lr_frac)
    log.info("soft value fit: final loss %.3e", fitlog.losses[-1])
    return ValueModel(net, fitlog), ds
