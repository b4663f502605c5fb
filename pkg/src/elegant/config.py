"""Experiment configuration: strict TOML schema with a stable content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .control import StageConfig, ValueStageConfig
from .pretrained import GaussianMixture, PretrainedModel
from .rewards import BumpReward, LinearReward, NominalFitConfig, QuadraticReward, Reward
from .value import ValueFitConfig

SCHEMA_VERSION = 1
METHODS = ("elegant", "no_kl", "truncation", "random_k", "naive", "guidance", "pretrained")


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path}: {msg}" if path else msg)


@dataclass
class ModelSpec:
    weights: list = field(default_factory=lambda: [0.5, 0.5])
    means: list = field(default_factory=lambda: [[-2.0], [2.0]])
    variances: list = field(default_factory=lambda: [0.25, 0.25])
    horizon: float = 5.0
    n_steps: int = 100

    def build(self) -> PretrainedModel:
        return PretrainedModel(GaussianMixture(np.array(self.weights), np.array(self.means),
                                               np.array(self.variances)), self.horizon)


@dataclass
class BumpSpec:
    center: list
    height: float
    width: float


@dataclass
class GenuineSpec:
    center: list = field(default_factory=lambda: [2.0])
    bumps: list = field(default_factory=list)  # list[BumpSpec]

    def build(self) -> BumpReward:
        return BumpReward(self.center, [(b.center, b.height, b.width) for b in self.bumps])


@dataclass
class NominalSpec:
    n: int = 2000
    upper: float | None = None
    component: int | None = None
    hidden: list = field(default_factory=lambda: [32, 32])
    epochs: int = 300
    batch: int = 128
    lr: float = 3e-3
    seed: int = 0
    holdout: float = 0.2

    def fit_config(self) -> NominalFitConfig:
        return NominalFitConfig(tuple(self.hidden), self.epochs, self.batch, self.lr, self.seed, self.holdout)


@dataclass
class RewardSpec:
    kind: str = "linear"  # linear | quadratic | genuine | fitted
    b: list = field(default_factory=lambda: [1.0])
    a: list = field(default_factory=list)
    c: float = 0.0
    genuine: GenuineSpec | None = None
    nominal: NominalSpec | None = None

    def analytic(self) -> Reward | None:
        if self.kind == "linear":
            return LinearReward(self.b, self.c)
        if self.kind == "quadratic":
            return QuadraticReward(self.a, self.b, self.c)
        if self.kind == "genuine":
            return self.genuine.build()
        return None


@dataclass
class MethodSpec:
    name: str = "elegant"
    alpha: float = 1.0
    truncate_at: float | None = None
    gamma: float = 30.0
    y_con: float = 1.0
    sigma_g: float = 1.0
    guidance_probes: int = 20
    guidance_rollouts: int = 2000


@dataclass
class ValueSpec:
    method: str = "soft"
    m: int = 512
    n: int = 128
    probe_scale: float = 1.0
    hidden: list = field(default_factory=lambda: [64, 64])
    epochs: int = 600
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0
    final_lr_frac: float = 0.1

    def build(self) -> ValueStageConfig:
        fit = ValueFitConfig(tuple(self.hidden), self.epochs, self.batch, self.lr, self.seed, self.final_lr_frac)
        return ValueStageConfig(self.method, self.m, self.n, self.probe_scale, fit)


@dataclass
class StageSpec:
    batch: int = 128
    epochs: int = 50
    steps_per_epoch: int = 10
    lr: float = 1e-4
    clip: float = 5.0
    seed: int = 0
    hidden: list = field(default_factory=lambda: [64, 64])
    final_lr_frac: float = 1.0

    def build(self, alpha: float, n_steps: int) -> StageConfig:
        return StageConfig(alpha, self.batch, self.epochs, self.steps_per_epoch, self.lr, self.clip,
                           self.seed, n_steps, tuple(self.hidden), self.final_lr_frac)


@dataclass
class EvalSpec:
    n: int = 10000
    seed: int = 12345
    bins: int = 40
    target: bool = True


@dataclass
class SweepSpec:
    alphas: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    reward: RewardSpec = field(default_factory=RewardSpec)
    method: MethodSpec = field(default_factory=MethodSpec)
    value: ValueSpec = field(default_factory=ValueSpec)
    stage1: StageSpec = field(default_factory=lambda: StageSpec(seed=1))
    stage2: StageSpec = field(default_factory=lambda: StageSpec(seed=2))
    eval: EvalSpec = field(default_factory=EvalSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    # ------------------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.method.name not in METHODS:
            raise ConfigError("method.name", f"unknown method {self.method.name!r}; choose from {', '.join(METHODS)}")
        if not self.method.alpha > 0:
            raise ConfigError("method.alpha", "must be positive")
        if self.reward.kind not in ("linear", "quadratic", "genuine", "fitted"):
            raise ConfigError("reward.kind", f"unknown reward kind {self.reward.kind!r}")
        if self.reward.kind == "fitted" and (self.reward.genuine is None or self.reward.nominal is None):
            raise ConfigError("reward", "a fitted reward needs [reward.genuine] and [reward.nominal] tables")
        if self.reward.kind == "genuine" and self.reward.genuine is None:
            raise ConfigError("reward.genuine", "missing table")
        if self.value.method not in ("soft", "mean"):
            raise ConfigError("value.method", f"unknown value method {self.value.method!r}")
        if self.method.name == "truncation" and self.method.truncate_at is None:
            self.method.truncate_at = 0.8 * self.model.horizon
        if self.eval.n < 2:
            raise ConfigError("eval.n", "need at least two samples")
        for a in self.sweep.alphas:
            if not a > 0:
                raise ConfigError("sweep.alphas", "every alpha must be positive")
        try:
            self.model.build()
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc
        for name in ("stage1", "stage2"):
            try:
                getattr(self, name).build(self.method.alpha, self.model.n_steps)
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            d = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("", f"TOML syntax error: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError("", f"config file {path} not found")
        return cls.from_toml(path.read_text())


_NESTED = {
    (ExperimentConfig, "model"): ModelSpec,
    (ExperimentConfig, "reward"): RewardSpec,
    (ExperimentConfig, "method"): MethodSpec,
    (ExperimentConfig, "value"): ValueSpec,
    (ExperimentConfig, "stage1"): StageSpec,
    (ExperimentConfig, "stage2"): StageSpec,
    (ExperimentConfig, "eval"): EvalSpec,
    (ExperimentConfig, "sweep"): SweepSpec,
    (RewardSpec, "genuine"): GenuineSpec,
    (RewardSpec, "nominal"): NominalSpec,
}

_TYPES = {"int": int, "float": (int, float), "str": str, "bool": bool, "list": list}


def _check_type(ftype: str, value, path: str):
    base = ftype.replace(" | None", "")
    if value is None:
        return
    want = _TYPES.get(base)
    if want is None:
        return
    if base in ("int", "float") and isinstance(value, bool):
        raise ConfigError(path, f"expected {base}, got bool")
    if not isinstance(value, want):
        raise ConfigError(path, f"expected {base}, got {type(value).__name__}")


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")
    kwargs = {}
    for name, value in d.items():
        sub = f"{path}.{name}" if path else name
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, sub)
        elif cls is GenuineSpec and name == "bumps":
            if not isinstance(value, list):
                raise ConfigError(sub, "expected an array of tables")
            kwargs[name] = [_build(BumpSpec, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            _check_type(str(fields[name].type), value, sub)
            kwargs[name] = float(value) if str(fields[name].type).startswith("float") and value is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from exc


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj]
    return obj
