import numpy as np
import pytest

from elegant import oracle
from elegant.pretrained import PretrainedModel, standard_normal
from elegant.rewards import LinearReward, constant_reward
from elegant.value import (ValueDataset, ValueFitConfig, fit_value_mean, fit_value_soft, generate_value_dataset,
                           soft_value_targets)

T = 5.0


@pytest.fixture
def stationary():
    # data N(0, 1) is invariant under the forward process, so the reverse SDE is the OU dx = -x/2 dt + dw
    return PretrainedModel(standard_normal(1), T)


def test_constant_reward_dataset(stationary):
    ds = generate_value_dataset(stationary, constant_reward(2.5), 50, stationary.grid(20), seed=0)
    assert np.all(ds.y == 2.5)
    y = soft_value_targets(stationary, constant_reward(2.5), 0.3, ds.x[:5], 8, stationary.grid(20), 0)
    assert np.allclose(y, 2.5, atol=1e-12)


def test_dataset_determinism_and_csv(stationary, tmp_path):
    a = generate_value_dataset(stationary, LinearReward([1.0]), 64, stationary.grid(), seed=4)
    b = generate_value_dataset(stationary, LinearReward([1.0]), 64, stationary.grid(), seed=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    back = ValueDataset.from_csv(a.to_csv(tmp_path / "v.csv"))
    assert np.array_equal(back.x, a.x) and np.array_equal(back.y, a.y)


def test_ou_conditional_mean_slope(stationary):
    n = 10000
    ds = generate_value_dataset(stationary, LinearReward([1.0]), n, stationary.grid(), seed=1)
    x, y = ds.x[:, 0], ds.y
    slope = np.cov(x, y)[0, 1] / np.var(x, ddof=1)
    resid = y - slope * x - (y.mean() - slope * x.mean())
    se = np.std(resid) / (np.std(x) * np.sqrt(n))
    # the Euler chain has its own contraction factor (1 - dt/2)^N, within a fraction of an SE of e^{-T/2}
    assert abs(slope - np.exp(-T / 2)) < 3 * se


def test_mean_fit_recovers_conditional_mean(stationary):
    # y has unit conditional variance; wider probes and a large batch keep the fit flat at +-3
    ds = generate_value_dataset(stationary, LinearReward([1.0]), 10000, stationary.grid(), seed=2, probe_scale=2.0)
    vm = fit_value_mean(ds, ValueFitConfig(epochs=200, batch=512))
    xs = np.linspace(-3, 3, 31)[:, None]
    exact = np.exp(-T / 2) * xs[:, 0]
    assert np.max(np.abs(vm(xs) - exact)) <= 0.1 * np.max(np.abs(exact)) + 0.03


def test_constant_dataset_fit():
    x = np.random.default_rng(0).normal(size=(300, 1))
    vm = fit_value_mean(ValueDataset(x, np.full(300, -1.25)), ValueFitConfig(lr=3e-3, final_lr_frac=0.01))
    assert np.max(np.abs(vm(np.linspace(-2, 2, 13)[:, None]) + 1.25)) <= 0.01


def test_soft_targets_large_alpha_give_plain_mean(stationary):
    x0 = np.array([[0.5], [-1.0]])
    grid = stationary.grid(50)
    soft = soft_value_targets(stationary, LinearReward([1.0]), 1e6, x0, 200, grid, 3)
    ds_means = []
    from elegant.sde import derive_seed, simulate_batch
    tb = simulate_batch(stationary.spec(), np.repeat(x0, 200, axis=0), grid, derive_seed(3, "soft-rollouts"), 400)
    ds_means = tb.terminal[:, 0].reshape(2, 200).mean(axis=1)
    assert np.allclose(soft, ds_means, atol=1e-3)


def test_soft_overflow_guard(stationary):
    with pytest.raises(OverflowError):
        soft_value_targets(stationary, LinearReward([1.0], 1000.0), 1.0, np.zeros((2, 1)), 4, stationary.grid(5), 0)
    with pytest.raises(ValueError):
        soft_value_targets(stationary, LinearReward([1.0]), 1.0, np.zeros((2, 1)), 1, stationary.grid(5), 0)


def test_soft_fit_stationary_closed_form(stationary):
    r = LinearReward([1.0])
    vm, ds = fit_value_soft(stationary, r, 1.0, m=1024, n=128, seed=0, probe_scale=2.0)
    xs = np.linspace(-3, 3, 25)[:, None]
    exact = np.exp(-T / 2) * xs[:, 0] + 0.5 * (1 - np.exp(-T))
    assert np.allclose(oracle.analytic_value(stationary, r, 1.0, 0.0, xs), exact, atol=1e-12)
    assert np.max(np.abs(vm(xs) - exact)) <= 0.05
    assert ds.provenance["rollouts_per_probe"] == 128


def test_jensen_ordering(model, linear):
    grid = model.grid()
    ds = generate_value_dataset(model, linear, 256, grid, seed=5)
    soft = soft_value_targets(model, linear, 1.0, ds.x, 64, grid, 5)
    assert soft.mean() > ds.y.mean()
