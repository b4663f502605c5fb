"""Neural-SDE control solver, the two-stage fine-tuning pipeline and baselines.

Stage 1 learns a drift q on [-T, 0] for an auxiliary Brownian SDE started at
``x_fix`` whose time-0 law becomes the fine-tuned initial distribution.
Stage 2 learns an additive drift u on [0, T] on top of the pretrained reverse
SDE. Both maximise E[terminal reward - (alpha/2) int |drift|^2 / sigma^2 dt]
by backpropagating through the unrolled Euler-Maruyama chain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet
from .nets import MLP, FitLog, fit_regression, mlp_graph
from .pretrained import PretrainedModel
from .rewards import Reward
from .sde import (Recorded, SdeSpec, TimeGrid, TrajectoryBatch, brownian, derive_seed, running_cost,
                  simulate_batch, simulate_recorded)
from .value import ValueFitConfig, ValueModel, fit_value_mean, fit_value_soft, generate_value_dataset

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class TrainingError(FloatingPointError):
    def __init__(self, epoch: int, step: int, msg: str = "non-finite loss"):
        self.epoch, self.step = epoch, step
        super().__init__(f"{msg} at epoch {epoch}, batch {step}")


# ---------------------------------------------------------------------------
# drift network
# ---------------------------------------------------------------------------

@dataclass
class DriftNet:
    """(t, x) -> R^d with inputs [x, t, sin(2 pi t / T), cos(2 pi t / T)]."""

    dim: int
    period: float
    params: ParamSet
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    @classmethod
    def create(cls, dim: int, period: float, hidden=(64, 64), seed: int = 0,
               activation: str = "tanh") -> "DriftNet":
        net = MLP.create(dim + 3, hidden, dim, seed=seed, activation=activation, zero_last=True)
        return cls(dim, float(period), net.params, tuple(hidden), activation)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def _time_features(self, t: float, batch: int) -> np.ndarray:
        w = 2 * np.pi * t / self.period
        return np.tile([t, np.sin(w), np.cos(w)], (batch, 1))

    def constants(self) -> dict[str, Node]:
        return self.params.constants()

    def graph(self, t: float, x: Node, nodes: dict[str, Node] | None = None) -> Node:
        if nodes is None:
            nodes = self.constants()
        feats = ad.concat([x, ad.const(self._time_features(t, x.shape[0]))], axis=-1)
        return mlp_graph(nodes, feats, self.n_layers, self.activation)

    def __call__(self, t: float, x) -> np.ndarray:
        return self.graph(t, ad.const(np.atleast_2d(x))).value

    def copy(self) -> "DriftNet":
        return DriftNet(self.dim, self.period, self.params.copy(), self.hidden, self.activation)

    def to_dict(self) -> dict:
        return {"kind": "drift_net", "dim": self.dim, "period": self.period, "hidden": list(self.hidden),
                "activation": self.activation, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftNet":
        return cls(int(d["dim"]), float(d["period"]), ParamSet.from_dict(d["params"]),
                   tuple(d["hidden"]), d["activation"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "DriftNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    alpha: float = 1.0
    batch: int = 128
    epochs: int = 50
    steps_per_epoch: int = 10
    lr: float = 1e-4
    clip: float = 5.0
    seed: int = 0
    n_steps: int = 100
    hidden: tuple[int, ...] = (64, 64)
    final_lr_frac: float = 1.0  # cosine decay from lr to final_lr_frac * lr; 1 keeps lr constant

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.batch < 1 or self.steps_per_epoch < 1 or self.n_steps < 1:
            raise ValueError("batch, steps_per_epoch and n_steps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.final_lr_frac <= 1:
            raise ValueError("final_lr_frac must lie in (0, 1]")
        self.hidden = tuple(self.hidden)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)

    def trend_ok(self) -> bool:
        """Advisory: the last-quarter mean loss is no worse than the first quarter's."""
        n = len(self.epoch_loss)
        if n < 4:
            return True
        q = max(1, n // 4)
        return float(np.mean(self.epoch_loss[-q:])) <= float(np.mean(self.epoch_loss[:q])) + 1e-12


Objective = Callable[[Recorded], Node]


def neural_sde_solve(objective: Objective, drift: DriftNet, spec: SdeSpec, init, grid: TimeGrid,
                     cfg: StageConfig, grad_from: Callable[[int, np.random.Generator], int] | None = None,
                     ) -> tuple[DriftNet, TrainLog]:
    """Maximise the batch mean of ``objective`` over the drift parameters with Adam.

    ``objective`` maps a recorded rollout to a (B,) node. Each step draws a
    fresh batch from its own derived seed. ``grad_from(epoch, rng)`` gives the
    first step whose dynamics are differentiated (truncated backpropagation).
    """
    drift = drift.copy()
    trainlog = TrainLog()
    rng = np.random.default_rng(derive_seed(cfg.seed, "solver"))
    total_steps = max(cfg.epochs * cfg.steps_per_epoch - 1, 1)
    for epoch in range(cfg.epochs):
        k0 = grad_from(epoch, rng) if grad_from is not None else 0
        total = 0.0
        for step in range(cfg.steps_per_epoch):
            nodes = drift.params.leaves()
            seed = derive_seed(cfg.seed, f"batch-{epoch}-{step}")
            rec = simulate_recorded(spec, drift, init, grid, seed, cfg.batch, cfg.alpha, nodes,
                                    grad_from_step=k0)
            per_path = objective(rec)
            loss = ad.scale(ad.sum(per_path), -1.0 / cfg.batch)
            if not np.isfinite(loss.value):
                raise TrainingError(epoch, step)
            ad.backward(loss)
            grads, norm = ad.clip_by_global_norm(ad.collect_grads(nodes), cfg.clip)
            frac = (epoch * cfg.steps_per_epoch + step) / total_steps
            lr = cfg.lr * (cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
            ad.adam_step(drift.params, grads, lr=lr)
            total += float(loss.value)
            trainlog.grad_norm.append(norm)
        trainlog.epoch_loss.append(total / cfg.steps_per_epoch)
        log.debug("epoch %d: loss %.4f", epoch, trainlog.epoch_loss[-1])
    if cfg.epochs and not trainlog.trend_ok():
        log.warning("training loss did not decrease (first vs last quarter of epochs)")
    return drift, trainlog


def reward_minus_cost(terminal_graph: Callable[[Node], Node]) -> Objective:
    """Per-path terminal reward minus the accumulated running cost."""
    return lambda rec: ad.sub(terminal_graph(rec.x_T), rec.y_T)


def stage1_grid(horizon: float, n_steps: int = 100) -> TimeGrid:
    return TimeGrid(-horizon, 0.0, n_steps)


def stage1_spec(dim: int, horizon: float) -> SdeSpec:
    """Zero-drift Brownian motion with constant diffusion 1/sqrt(T) on [-T, 0]."""
    return brownian(dim, 1.0 / np.sqrt(horizon))


def solve_stage1(value: ValueModel, dim: int, horizon: float, cfg: StageConfig,
                 x_fix=None) -> tuple[DriftNet, TrainLog]:
    x_fix = np.zeros(dim) if x_fix is None else np.asarray(x_fix, dtype=np.float64)
    q0 = DriftNet.create(dim, horizon, cfg.hidden, seed=derive_seed(cfg.seed, "q-init"))
    return neural_sde_solve(reward_minus_cost(value.graph), q0, stage1_spec(dim, horizon), x_fix,
                            stage1_grid(horizon, cfg.n_steps), cfg)


def solve_stage2(model: PretrainedModel, reward: Reward, init, cfg: StageConfig) -> tuple[DriftNet, TrainLog]:
    """``init`` is the stage-1 sampler, ``model.initial_sampler()``, or fixed states."""
    u0 = DriftNet.create(model.dim, model.horizon, cfg.hidden, seed=derive_seed(cfg.seed, "u-init"))
    return neural_sde_solve(reward_minus_cost(reward.graph), u0, model.spec(), init,
                            model.grid(cfg.n_steps), cfg)


def _with_drift(base: SdeSpec, extra: Callable[[float, np.ndarray], np.ndarray]) -> SdeSpec:
    return SdeSpec(lambda t, x: base.drift(t, x) + extra(t, x), base.sigma, base.dim)


def stage1_sampler(q: DriftNet, horizon: float, n_steps: int = 100, x_fix=None):
    """init(batch, seed) drawing the time-0 states of the stage-1 SDE."""
    x_fix = np.zeros(q.dim) if x_fix is None else np.asarray(x_fix, dtype=np.float64)
    spec = _with_drift(stage1_spec(q.dim, horizon), q)
    grid = stage1_grid(horizon, n_steps)

    def draw(batch, seed):
        return simulate_batch(spec, x_fix, grid, seed, batch).terminal

    return draw


# ---------------------------------------------------------------------------
# end-to-end pipeline
# ---------------------------------------------------------------------------

@dataclass
class ValueStageConfig:
    method: str = "soft"  # soft | mean
    m: int = 512
    n: int = 128
    probe_scale: float = 1.0
    fit: ValueFitConfig = field(default_factory=ValueFitConfig)

    def __post_init__(self):
        if self.method not in ("soft", "mean"):
            raise ValueError(f"unknown value method {self.method!r}")


@dataclass
class FineTunedModel:
    model: PretrainedModel
    alpha: float
    q: DriftNet
    u: DriftNet
    value: ValueModel | None = None
    n_steps: int = 100
    x_fix: np.ndarray | None = None
    logs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x_fix is None:
            self.x_fix = np.zeros(self.model.dim)

    @property
    def sigma_tilde(self) -> float:
        return 1.0 / np.sqrt(self.model.horizon)

    def initial_sampler(self):
        return stage1_sampler(self.q, self.model.horizon, self.n_steps, self.x_fix)

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"q": self.q.save(out / "stage1_drift.json"), "u": self.u.save(out / "stage2_drift.json")}
        if self.value is not None:
            paths["value"] = self.value.net.params.save(out / "value_net.json")
        return paths

    @classmethod
    def load(cls, model: PretrainedModel, alpha: float, paths: dict, n_steps: int = 100) -> "FineTunedModel":
        return cls(model, alpha, DriftNet.load(paths["q"]), DriftNet.load(paths["u"]), n_steps=n_steps)


def zero_finetuned(model: PretrainedModel, alpha: float = 1.0, n_steps: int = 100,
                   hidden=(64, 64)) -> FineTunedModel:
    """Untrained (zero-drift) fine-tuned model; samples like the pretrained model."""
    return FineTunedModel(model, alpha, DriftNet.create(model.dim, model.horizon, hidden),
                          DriftNet.create(model.dim, model.horizon, hidden), n_steps=n_steps)


def elegant_finetune(model: PretrainedModel, reward: Reward, alpha: float, stage1: StageConfig,
                     stage2: StageConfig, value_cfg: ValueStageConfig | None = None,
                     seed: int = 0) -> FineTunedModel:
    """Value fit, then stage 1, then stage 2."""
    value_cfg = value_cfg or ValueStageConfig()
    if stage1.alpha != alpha or stage2.alpha != alpha:
        raise ValueError("alpha must agree across stages")
    logs = {}
    try:
        if value_cfg.method == "soft":
            vm, _ = fit_value_soft(model, reward, alpha, m=value_cfg.m, n=value_cfg.n, cfg=value_cfg.fit,
                                   grid=model.grid(stage2.n_steps), seed=derive_seed(seed, "value"),
                                   probe_scale=value_cfg.probe_scale)
        else:
            ds = generate_value_dataset(model, reward, value_cfg.m, model.grid(stage2.n_steps),
                                        derive_seed(seed, "value"), value_cfg.probe_scale)
            vm = fit_value_mean(ds, value_cfg.fit)
        logs["value"] = vm.log.losses
    except Exception as exc:  # noqa: BLE001
        raise StageError("value", exc) from exc
    try:
        q, l1 = solve_stage1(vm, model.dim, model.horizon, stage1)
        logs["stage1"] = l1.epoch_loss
    except Exception as exc:  # noqa: BLE001
        raise StageError("stage1", exc) from exc
    try:
        init = stage1_sampler(q, model.horizon, stage1.n_steps)
        u, l2 = solve_stage2(model, reward, init, stage2)
        logs["stage2"] = l2.epoch_loss
    except Exception as exc:  # noqa: BLE001
        raise StageError("stage2", exc) from exc
    return FineTunedModel(model, alpha, q, u, vm, stage2.n_steps, logs=logs)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleResult:
    terminal: np.ndarray  # (B, d)
    paths: TrajectoryBatch  # stage on [0, T]
    kl_stage2: np.ndarray  # (B,) int |perturbation|^2 / (2 sigma^2) dt
    initial_paths: TrajectoryBatch | None = None  # stage on [-T, 0]
    kl_stage1: np.ndarray | None = None  # (B,) int |q|^2 / (2 sigma~^2) dt

    @property
    def n(self) -> int:
        return len(self.terminal)


def sample_controlled(model: PretrainedModel, perturb, init, count: int, seed: int,
                      n_steps: int = 100) -> SampleResult:
    """Pretrained SDE plus ``perturb(t, x)``; the path-KL integrand is recomputed on the stored paths."""
    spec = _with_drift(model.spec(), perturb)
    tb = simulate_batch(spec, init, model.grid(n_steps), derive_seed(seed, "stage2"), count)
    return SampleResult(tb.terminal, tb, running_cost(tb, perturb, model.sigma, 1.0))


def sample_finetuned(ft: FineTunedModel, count: int, seed: int) -> SampleResult:
    T = ft.model.horizon
    spec1 = _with_drift(stage1_spec(ft.model.dim, T), ft.q)
    tb1 = simulate_batch(spec1, ft.x_fix, stage1_grid(T, ft.n_steps), derive_seed(seed, "stage1"), count)
    res = sample_controlled(ft.model, ft.u, tb1.terminal, count, seed, ft.n_steps)
    res.initial_paths = tb1
    res.kl_stage1 = running_cost(tb1, ft.q, spec1.sigma, 1.0)
    return res


def _zero(t, x):
    return np.zeros_like(x)


def pretrained_sampler(model: PretrainedModel, count: int, seed: int, n_steps: int = 100) -> SampleResult:
    return sample_controlled(model, _zero, model.initial_sampler(), count, seed, n_steps)


def naive_drift_sampler(model: PretrainedModel, reward: Reward, alpha: float, count: int, seed: int,
                        n_steps: int = 100) -> SampleResult:
    """Adds grad r(x) / alpha to the pretrained drift at every time; not a valid fine-tuning rule."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return sample_controlled(model, lambda t, x: reward.grad(x) / alpha, model.initial_sampler(),
                             count, seed, n_steps)


# ---------------------------------------------------------------------------
# baselines trained without the KL penalty
# ---------------------------------------------------------------------------

def train_no_kl(model: PretrainedModel, reward: Reward, cfg: StageConfig, truncate_at: float | None = None,
                random_k: bool = False) -> tuple[DriftNet, TrainLog]:
    """Maximise E[r(x_T)] alone, starting from the pretrained initial law.

    ``truncate_at = K`` differentiates only the steps in [K, T]; ``random_k``
    draws K uniformly on [0, T) for every epoch.
    """
    grid = model.grid(cfg.n_steps)
    grad_from = None
    if truncate_at is not None and random_k:
        raise ValueError("choose either a fixed truncation point or random K")
    if truncate_at is not None:
        if not 0 <= truncate_at < model.horizon:
            raise ValueError("truncation point must lie in [0, T)")
        k = int(round(truncate_at / grid.dt))
        grad_from = lambda epoch, rng: k  # noqa: E731
    elif random_k:
        grad_from = lambda epoch, rng: int(rng.integers(0, grid.n_steps))  # noqa: E731
    u0 = DriftNet.create(model.dim, model.horizon, cfg.hidden, seed=derive_seed(cfg.seed, "u-init"))
    return neural_sde_solve(lambda rec: reward.graph(rec.x_T), u0, model.spec(), model.initial_sampler(),
                            grid, cfg, grad_from)


# ---------------------------------------------------------------------------
# classifier-style guidance
# ---------------------------------------------------------------------------

@dataclass
class TimeRewardModel:
    """mu(t, x) ~ E[r(x_T) | x_t = x], a single network with time as an input."""

    net: MLP
    log: FitLog

    def _inputs(self, t, x):
        x = np.atleast_2d(x)
        return np.hstack([x, np.full((len(x), 1), float(t))])

    def __call__(self, t, x) -> np.ndarray:
        return self.net(self._inputs(t, x))[:, 0]

    def value_and_grad(self, t, x):
        vals, g = self.net.input_grad(self._inputs(t, x))
        return vals, g[:, :-1]


def fit_time_reward_model(model: PretrainedModel, reward: Reward, probe_times, n: int,
                          hidden=(64, 64), cfg: ValueFitConfig | None = None, n_steps: int = 100,
                          seed: int = 0) -> TimeRewardModel:
    """Regress r(x_T) on (x_t, t) over pretrained rollouts at the grid points nearest each probe time."""
    if n < 1:
        raise ValueError("need at least one rollout")
    cfg = cfg or ValueFitConfig()
    grid = model.grid(n_steps)
    tb = model.sample(n, derive_seed(seed, "time-reward"), n_steps)
    r = reward(tb.terminal)
    X, y = [], []
    for t in probe_times:
        k = int(round((t - grid.t_start) / grid.dt))
        X.append(np.hstack([tb.states[:, k], np.full((n, 1), grid.t(k))]))
        y.append(r)
    net = MLP.create(model.dim + 1, hidden, 1, seed=cfg.seed, zero_last=True)
    fitlog = fit_regression(net, np.vstack(X), np.concatenate(y), epochs=cfg.epochs, batch=cfg.batch,
                            lr=cfg.lr, seed=cfg.seed, final_lr_frac=cfg.final_lr_frac)
    return TimeRewardModel(net, fitlog)


def guidance_perturbation(model: PretrainedModel, mean_model, gamma: float, y_con: float, sigma_g: float):
    """gamma sigma^2 (y_con - mu) / sigma_g^2 grad mu; ``mean_model.value_and_grad(t, x)``."""
    if gamma < 0 or not sigma_g > 0:
        raise ValueError("need gamma >= 0 and sigma_g > 0")

    def perturb(t, x):
        if gamma == 0:
            return np.zeros_like(x)
        mu, g = mean_model.value_and_grad(t, x)
        return (gamma * model.sigma(t) ** 2 / sigma_g ** 2) * (y_con - mu)[:, None] * g

    return perturb


def guidance_sampler(model: PretrainedModel, mean_model, gamma: float = 30.0, y_con: float = 1.0,
                     sigma_g: float = 1.0, count: int = 1000, seed: int = 0, n_steps: int = 100) -> SampleResult:
    return sample_controlled(model, guidance_perturbation(model, mean_model, gamma, y_con, sigma_g),
                             model.initial_sampler(), count, seed, n_steps)


def stage_config_dict(cfg: StageConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
