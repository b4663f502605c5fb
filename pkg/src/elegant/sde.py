"""Time grids, Euler-Maruyama simulation and the discretised running cost.

Every trajectory owns one counter-based RNG stream keyed by
``(master_seed, stream_index)``; row ``k`` of that stream is the increment of
step ``k``. Batches are therefore identical however they are split or ordered.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node


class SimulationError(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        self.step = step
        super().__init__(f"{msg} at step {step}")


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"empty time interval [{self.t_start}, {self.t_end}]")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def t(self, k: int) -> float:
        return self.t_start + k * self.dt

    @property
    def points(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt


@dataclass
class SdeSpec:
    """dx = drift(t, x) dt + sigma(t) dw on R^dim.

    ``drift`` maps (t, (B, d) array) to a (B, d) array. ``drift_vjp(t, x, g)``
    returns g^T d(drift)/dx row by row; without it the drift is treated as a
    constant when recorded into a graph.
    """

    drift: Callable[[float, np.ndarray], np.ndarray]
    sigma: Callable[[float], float]
    dim: int
    drift_vjp: Optional[Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = None


def zero_drift(t, x):
    return np.zeros_like(x)


def zero_vjp(t, x, g):
    return np.zeros_like(g)


def brownian(dim: int = 1, sigma: float = 1.0) -> SdeSpec:
    return SdeSpec(zero_drift, lambda t: sigma, dim, zero_vjp)


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream: int

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[int(self.master_seed), int(self.stream)]))

    def normals(self, n_steps: int, dim: int) -> np.ndarray:
        return self.generator().standard_normal((n_steps, dim))


def brownian_increments(master_seed: int, streams: Sequence[int], grid: TimeGrid, dim: int) -> np.ndarray:
    """(B, N, d) increments with variance dt per component, one stream per row."""
    out = np.empty((len(streams), grid.n_steps, dim))
    for i, s in enumerate(streams):
        out[i] = RngStream(master_seed, s).normals(grid.n_steps, dim)
    return out * np.sqrt(grid.dt)


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-seed for a named purpose."""
    return int(np.random.SeedSequence([int(seed), *tag.encode()]).generate_state(1, np.uint64)[0] >> 1)


def euler_step(x, drift, dt, sigma, dw):
    return x + drift * dt + sigma * dw


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (N+1, d)
    noise: np.ndarray  # (N, d)
    seed: tuple[int, int]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def replay(self, spec: SdeSpec) -> np.ndarray:
        x = self.states[:1].copy()
        out = [x[0]]
        for k in range(self.grid.n_steps):
            t = self.grid.t(k)
            x = euler_step(x, spec.drift(t, x), self.grid.dt, spec.sigma(t), self.noise[k][None])
            out.append(x[0])
        return np.array(out)

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.states.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)])
            for t, x in zip(self.grid.points, self.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x])
        return path


@dataclass
class TrajectoryBatch:
    grid: TimeGrid
    states: np.ndarray  # (B, N+1, d)
    noise: np.ndarray  # (B, N, d)
    master_seed: int
    streams: np.ndarray

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i) -> Trajectory:
        return Trajectory(self.grid, self.states[i], self.noise[i], (self.master_seed, int(self.streams[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def initial(self) -> np.ndarray:
        return self.states[:, 0]


def _initial_states(init, batch: int, dim: int, seed: int) -> np.ndarray:
    if callable(init):
        x0 = np.asarray(init(batch, seed), dtype=np.float64)
    else:
        x0 = np.asarray(init, dtype=np.float64)
        if x0.ndim == 1:
            x0 = np.broadcast_to(x0, (batch, len(x0)))
    x0 = np.array(x0, dtype=np.float64).reshape(batch, -1)
    if x0.shape[1] != dim:
        raise ValueError(f"initial state dimension {x0.shape[1]} does not match SDE dimension {dim}")
    return x0


def simulate_batch(spec: SdeSpec, init, grid: TimeGrid, master_seed: int, batch: int,
                   stream_offset: int = 0) -> TrajectoryBatch:
    """Euler-Maruyama over ``grid`` for ``batch`` paths with streams offset.. offset+batch-1.

    ``init`` is a state vector, a (batch, d) array, or ``init(batch, seed) -> array``.
    """
    streams = np.arange(stream_offset, stream_offset + batch)
    x = _initial_states(init, batch, spec.dim, derive_seed(master_seed, f"init{stream_offset}"))
    dw = brownian_increments(master_seed, streams, grid, spec.dim)
    states = np.empty((batch, grid.n_steps + 1, spec.dim))
    states[:, 0] = x
    for k in range(grid.n_steps):
        t = grid.t(k)
        x = euler_step(x, spec.drift(t, x), grid.dt, spec.sigma(t), dw[:, k])
        if not np.all(np.isfinite(x)):
            raise SimulationError(k + 1)
        states[:, k + 1] = x
    return TrajectoryBatch(grid, states, dw, master_seed, streams)


def simulate(spec: SdeSpec, x_init, grid: TimeGrid, rng: RngStream) -> Trajectory:
    tb = simulate_batch(spec, np.atleast_2d(x_init) if not callable(x_init) else x_init,
                        grid, rng.master_seed, 1, stream_offset=rng.stream)
    return tb[0]


def running_cost(traj, u: Callable, sigma: Callable[[float], float], alpha: float):
    """(alpha/2) * sum_k |u(t_k, x_k)|^2 / sigma(t_k)^2 * dt, left Riemann sum.

    Accepts a Trajectory (returns a float) or a TrajectoryBatch (returns (B,)).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    single = isinstance(traj, Trajectory)
    states = traj.states[None] if single else traj.states
    grid = traj.grid
    y = np.zeros(len(states))
    for k in range(grid.n_steps):
        t = grid.t(k)
        s = sigma(t)
        if s == 0:
            raise ZeroDivisionError(f"sigma vanishes at t={t}")
        uk = u(t, states[:, k])
        y = y + np.sum(uk * uk, axis=1) * (0.5 * alpha * grid.dt / s ** 2)
    return float(y[0]) if single else y


@dataclass
class Recorded:
    traj: TrajectoryBatch
    x_T: Node  # (B, d)
    y_T: Node  # (B,) accumulated running cost


def simulate_recorded(spec: SdeSpec, control, init, grid: TimeGrid, master_seed: int, batch: int,
                      alpha: float, nodes: dict[str, Node] | None = None, stream_offset: int = 0,
                      grad_from_step: int = 0) -> Recorded:
    """Unrolled Euler-Maruyama recorded as an autodiff graph.

    ``control.graph(t, x_node, nodes)`` adds to the base drift. The state is
    augmented with y, the running cost of the control. Noise enters as
    constants. Steps before ``grad_from_step`` are simulated without gradient
    tracking (truncated backpropagation).
    """
    streams = np.arange(stream_offset, stream_offset + batch)
    x0 = _initial_states(init, batch, spec.dim, derive_seed(master_seed, f"init{stream_offset}"))
    dw = brownian_increments(master_seed, streams, grid, spec.dim)
    states = np.empty((batch, grid.n_steps + 1, spec.dim))
    states[:, 0] = x0
    x = ad.const(x0)
    y = ad.const(np.zeros(batch))
    consts = None
    for k in range(grid.n_steps):
        t = grid.t(k)
        tracking = nodes is not None and k >= grad_from_step
        if not tracking and consts is None:
            consts = control.constants()
        if tracking and not x.requires_grad:
            x = ad.const(x.value)
        u = control.graph(t, x, nodes if tracking else consts)
        if spec.drift_vjp is not None and x.requires_grad:
            f = ad.field(x, lambda v, t=t: spec.drift(t, v), lambda v, g, t=t: spec.drift_vjp(t, v, g),
                         name="base_drift")
        else:
            f = ad.const(spec.drift(t, x.value))
        s = spec.sigma(t)
        x = ad.add(ad.add(x, ad.scale(ad.add(f, u), grid.dt)), ad.const(s * dw[:, k]))
        y = ad.add(y, ad.scale(ad.sum(ad.square(u), axis=1), 0.5 * alpha * grid.dt / s ** 2))
        if not np.all(np.isfinite(x.value)):
            raise SimulationError(k + 1)
        states[:, k + 1] = x.value
    return Recorded(TrajectoryBatch(grid, states, dw, master_seed, streams), x, y)
