"""Acceptance criteria 1-10, each printed as one PASS/FAIL line in the summary.

Criteria 6, 7 and 9 share the canonical run: the sweep reuses the alpha = 1
run directory trained for criterion 6.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from elegant import autodiff as ad
from elegant import oracle
from elegant.cli import evaluate_run, main, run_method, run_sweep
from elegant.config import ExperimentConfig
from elegant.control import DriftNet, StageConfig, neural_sde_solve, reward_minus_cost
from elegant.metrics import diversity, diversity_se, wasserstein1_1d
from elegant.pretrained import PretrainedModel, canonical_mixture
from elegant.rewards import LinearReward
from elegant.sde import SdeSpec, TimeGrid, brownian, simulate_batch
from elegant.value import fit_value_soft

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
REQUIRED_IDENTITIES = ("marginal_identity", "terminal_law", "optimal_initial", "joint_identity",
                       "conditional_identity", "bridge_enumeration", "normalizer_t_independence")


def load(filename: str, **method) -> ExperimentConfig:
    cfg = ExperimentConfig.load(CONFIGS / filename)
    if method:
        cfg = dataclasses.replace(cfg, method=dataclasses.replace(cfg.method, **method)).validate()
    return cfg


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def canonical(workdir):
    t0 = time.perf_counter()
    cfg = load("canonical.toml")
    manifest = run_method(cfg, workdir / "sweep" / "alpha_1")
    rep, _ = evaluate_run(cfg, manifest)
    pre_cfg = load("canonical.toml", name="pretrained")
    pre_rep, _ = evaluate_run(pre_cfg, run_method(pre_cfg, workdir / "pretrained"))
    return rep, pre_rep, time.perf_counter() - t0


# ---------------------------------------------------------------------------

def test_1_oracle_identities(workdir, acceptance):
    t0 = time.perf_counter()
    code = main(["oracle-check", "--out-dir", str(workdir / "oracle")])
    elapsed = time.perf_counter() - t0
    rep = json.loads((workdir / "oracle" / "oracle_report.json").read_text())
    worst = max(rep["checks"][f"discrete.{k}"]["deviation"] for k in REQUIRED_IDENTITIES)
    ok = code == 0 and rep["pass"] and worst <= 1e-10 and elapsed <= 30
    acceptance(1, "oracle identities", ok, f"worst discrete deviation {worst:.2e}, exit {code}, {elapsed:.1f}s")
    assert ok, rep["failed"]


PRIMITIVES = {
    "add": (ad.add, [(3, 4), (4,)]),
    "sub": (ad.sub, [(3, 4), (3, 4)]),
    "mul": (ad.mul, [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -1.7), [(5,)]),
    "matvec": (ad.matvec, [(3, 4), (4,)]),
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "tanh": (ad.tanh, [(6,)]),
    "relu": (ad.relu, [(6,)]),
    "square": (ad.square, [(2, 3)]),
    "sum": (lambda a: ad.sum(a, axis=1), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 1)]),
    "slice": (lambda a: ad.slice(a, (np.s_[:], 1)), [(3, 4)]),
    "field": (lambda a: ad.field(a, np.sin, lambda v, g: g * np.cos(v)), [(4, 2)]),
}


def _rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def _primitive_worst(build, shapes, rng) -> float:
    worst = 0.0
    for _ in range(100):
        xs = [rng.normal(size=s) for s in shapes]
        # keep relu inputs clear of the kink so the difference quotient is valid
        xs = [np.where(np.abs(x) < 1e-3, 1e-3, x) for x in xs]
        out_shape = build(*[ad.const(x) for x in xs]).value.shape
        w = rng.normal(size=out_shape)
        leaves = [ad.leaf(x) for x in xs]
        ad.backward(ad.sum(ad.mul(build(*leaves), ad.const(w))))
        for i, x in enumerate(xs):
            def f(v, i=i):
                args = [ad.const(z) for z in xs]
                args[i] = ad.const(v)
                return float(np.sum(build(*args).value * w))
            worst = max(worst, _rel_err(leaves[i].grad, ad.numeric_grad(f, x.copy())))
    return worst


def _drift_net_worst(rng) -> float:
    net = DriftNet.create(2, 5.0, (64, 64), seed=3)
    for k in net.params.values:
        net.params.values[k] = net.params.values[k] + 0.3 * rng.standard_normal(net.params.values[k].shape)
    worst = 0.0
    for _ in range(100):
        t, x = float(rng.uniform(0, 5)), rng.normal(size=(1, 2))
        w = rng.normal(size=(1, 2))
        nodes = net.params.leaves()
        xl = ad.leaf(x)
        ad.backward(ad.sum(ad.mul(net.graph(t, xl, nodes), ad.const(w))))
        f_x = lambda v: float(np.sum(net(t, v) * w))  # noqa: E731
        worst = max(worst, _rel_err(xl.grad, ad.numeric_grad(f_x, x.copy())))
        # directional check over the full parameter vector
        direction = {k: rng.normal(size=v.shape) for k, v in net.params.values.items()}
        analytic = sum(float(np.sum(nodes[k].grad * direction[k])) for k in direction)
        h, base = 1e-5, net.params.copy()

        def shifted(sign):
            moved = net.copy()
            for k in direction:
                moved.params.values[k] = base.values[k] + sign * h * direction[k]
            return float(np.sum(moved(t, x) * w))
        numeric = (shifted(1) - shifted(-1)) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
    return worst


def test_2_autodiff(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    errs = {name: _primitive_worst(build, shapes, rng) for name, (build, shapes) in PRIMITIVES.items()}
    errs["drift_net"] = _drift_net_worst(rng)
    elapsed = time.perf_counter() - t0
    worst_name = max(errs, key=errs.get)
    ok = errs[worst_name] <= 1e-4 and elapsed <= 10
    acceptance(2, "autodiff", ok, f"worst rel err {errs[worst_name]:.2e} ({worst_name}), {elapsed:.1f}s")
    assert ok, errs


def test_3_sde_fidelity(acceptance):
    t0 = time.perf_counter()
    theta, T, x0, n = 0.5, 1.0, 1.0, 100_000
    ou = SdeSpec(lambda t, x: -theta * x, lambda t: 1.0, 1, lambda t, x, g: -theta * g)
    xT = simulate_batch(ou, np.array([x0]), TimeGrid(0.0, T, 100), 31, n).terminal[:, 0]
    mean, var = np.exp(-theta * T) * x0, (1 - np.exp(-2 * theta * T)) / (2 * theta)
    z_mean = abs(xT.mean() - mean) / np.sqrt(var / n)
    z_var = abs(xT.var() - var) / (var * np.sqrt(2 / n))
    model = PretrainedModel(canonical_mixture())
    w1 = wasserstein1_1d(model.sample(n, 32, 100).terminal, model.data)
    elapsed = time.perf_counter() - t0
    ok = z_mean <= 3 and z_var <= 3 and w1 <= 0.05 and elapsed <= 120
    acceptance(3, "sde fidelity", ok, f"OU z(mean) {z_mean:.2f}, z(var) {z_var:.2f}, pretrained W1 {w1:.4f}, "
                                      f"{elapsed:.1f}s")
    assert ok


def test_4_value_oracle(acceptance):
    t0 = time.perf_counter()
    cfg = load("canonical.toml")
    vs = cfg.value.build()
    model, reward = cfg.model.build(), LinearReward([1.0])
    value, _ = fit_value_soft(model, reward, 1.0, vs.m, vs.n, vs.fit, seed=cfg.value.seed, probe_scale=vs.probe_scale)
    xs = np.linspace(-3, 3, 121)[:, None]
    err = float(np.max(np.abs(value(xs) - oracle.analytic_value(model, reward, 1.0, 0.0, xs))))
    elapsed = time.perf_counter() - t0
    ok = err <= 0.05 and elapsed <= 300
    acceptance(4, "value oracle", ok, f"max abs err {err:.4f} on [-3, 3], {elapsed:.1f}s")
    assert ok


def test_5_drift_oracle(acceptance):
    # Brownian base on [0, 1], r(x) = x, alpha = 1: the optimal drift is the constant 1
    t0 = time.perf_counter()
    spec, grid = brownian(1), TimeGrid(0.0, 1.0, 100)
    init = lambda b, s: np.random.default_rng(s).standard_normal((b, 1))  # noqa: E731
    cfg = StageConfig(alpha=1.0, epochs=100, steps_per_epoch=10, lr=1e-2, seed=0)
    u, _ = neural_sde_solve(reward_minus_cost(LinearReward([1.0]).graph), DriftNet.create(1, 1.0), spec, init,
                            grid, cfg)
    controlled = SdeSpec(lambda t, x: u(t, x), spec.sigma, 1)
    tb = simulate_batch(controlled, init, grid, 5, 500)
    err = max(float(np.max(np.abs(u(grid.t(k), tb.states[:, k]) - 1.0))) for k in range(grid.n_steps))
    elapsed = time.perf_counter() - t0
    ok = err <= 0.1 and elapsed <= 300
    acceptance(5, "drift oracle", ok, f"max abs err {err:.4f} on visited states, {elapsed:.1f}s")
    assert ok


def test_6_end_to_end_target_law(canonical, acceptance):
    rep, pre_rep, elapsed = canonical
    ratio = rep.w1_target / pre_rep.w1_target
    ok = rep.w1_target <= 0.1 and ratio <= 0.25 and elapsed <= 900
    acceptance(6, "end-to-end target law", ok, f"W1 {rep.w1_target:.4f} (pretrained {pre_rep.w1_target:.4f}, "
                                               f"ratio {ratio:.3f}), {elapsed:.0f}s")
    assert ok


def test_7_naive_drift_falsified(canonical, workdir, acceptance):
    rep = canonical[0]
    t0 = time.perf_counter()
    cfg = load("canonical.toml", name="naive")
    naive_rep, _ = evaluate_run(cfg, run_method(cfg, workdir / "naive"))
    elapsed = time.perf_counter() - t0
    ratio = naive_rep.w1_target / rep.w1_target
    ok = ratio >= 1.5 and elapsed <= 300
    acceptance(7, "naive drift falsified", ok, f"naive W1 {naive_rep.w1_target:.4f} vs {rep.w1_target:.4f}, "
                                               f"ratio {ratio:.1f}, {elapsed:.1f}s")
    assert ok


def test_8_overoptimization(workdir, acceptance):
    t0 = time.perf_counter()
    reps = {}
    for name in ("elegant", "no_kl", "truncation", "pretrained"):
        cfg = load("overopt.toml", name=name)
        reps[name], _ = evaluate_run(cfg, run_method(cfg, workdir / "overopt" / name))
    elapsed = time.perf_counter() - t0
    el, nk = reps["elegant"], reps["no_kl"]
    kl_ratio = nk.kl_total / el.kl_total
    ok = (nk.reward >= el.reward and el.genuine_reward > nk.genuine_reward and kl_ratio >= 2 and elapsed <= 1800)
    table = "; ".join(f"{k} r={v.reward:.2f} r*={v.genuine_reward:.2f} KL={v.kl_total:.2f} Div={v.diversity:.2f}"
                      for k, v in reps.items())
    acceptance(8, "overoptimization", ok, f"{table}; KL ratio {kl_ratio:.1f}, {elapsed:.0f}s")
    assert ok


def test_9_alpha_sweep(canonical, workdir, acceptance):
    t0 = time.perf_counter()
    cfg = load("sweep.toml")
    rows = run_sweep(cfg, workdir / "sweep")
    elapsed = time.perf_counter() - t0 + canonical[2]
    ok_rows = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: -r["alpha"])
    rewards = [r["Reward(r)"] for r in ok_rows]
    divs = [r["Div"] for r in ok_rows]
    trend = (len(ok_rows) == 3 and all(a <= b for a, b in zip(rewards, rewards[1:]))
             and all(a >= b for a, b in zip(divs, divs[1:])))
    ok = trend and elapsed <= 2700
    detail = ", ".join(f"alpha={r['alpha']:g}: r={r['Reward(r)']:.3f} Div={r['Div']:.3f}" for r in ok_rows)
    acceptance(9, "alpha sweep trend", ok, f"{detail}, {elapsed:.0f}s including the shared alpha=1 run")
    assert ok, rows


def test_10_metric_sanity(workdir, acceptance):
    t0 = time.perf_counter()
    cfg = load("canonical.toml", name="pretrained")
    rep, _ = evaluate_run(cfg, run_method(cfg, workdir / "pretrained_metric"))
    kl_ok = abs(rep.kl_total) <= 3 * (rep.kl_stage2_se + rep.kl_stage1_bound_se)
    same = diversity(np.full((500, 1), 0.7))
    x = np.random.default_rng(10).standard_normal((10_000, 1))
    div, se = diversity(x), diversity_se(x)
    elapsed = time.perf_counter() - t0
    ok = kl_ok and same == 0.0 and abs(div - 2 / np.sqrt(np.pi)) <= 3 * se and elapsed <= 60
    acceptance(10, "metric sanity", ok, f"pretrained KL {rep.kl_total:.2e}, identical Div {same:.1f}, "
                                        f"N(0,1) Div {div:.4f} vs {2 / np.sqrt(np.pi):.4f} (SE {se:.4f}), "
                                        f"{elapsed:.1f}s")
    assert ok
