"""Ground-truth solutions used to check the fine-tuning pipeline.

Two independent families:

* a finite-state, finite-horizon Markov chain on which the entropy-regularised
  control problem is solved exactly by soft value iteration, and
* closed forms for the Gaussian-mixture pretrained model with a linear reward.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .pretrained import GaussianMixture, PretrainedModel, forward_marginal, posterior_params, standard_normal
from .rewards import LinearReward, QuadGrid

# ---------------------------------------------------------------------------
# discrete chain
# ---------------------------------------------------------------------------


@dataclass
class DiscreteChain:
    P: np.ndarray  # (H, n, n), row-stochastic
    rho0: np.ndarray  # (n,)
    r: np.ndarray  # (n,)
    alpha: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim == 2:
            self.P = self.P[None]
        self.P = self.P.reshape(-1, len(self.rho0), len(self.rho0))
        self.rho0 = np.asarray(self.rho0, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        if np.any(self.P < 0) or np.any(self.rho0 < 0):
            raise ValueError("probabilities must be non-negative")
        if self.H and np.max(np.abs(self.P.sum(axis=2) - 1)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if abs(self.rho0.sum() - 1) > 1e-12:
            raise ValueError("initial law must sum to 1")

    @property
    def n(self) -> int:
        return len(self.rho0)

    @property
    def H(self) -> int:
        return len(self.P)

    def marginals(self) -> np.ndarray:
        out = [self.rho0]
        for Pt in self.P:
            out.append(out[-1] @ Pt)
        return np.array(out)

    @classmethod
    def random(cls, n: int, H: int, seed: int, alpha: float = 0.5, sparsity: float = 0.3) -> "DiscreteChain":
        rng = np.random.default_rng(seed)
        P = rng.random((H, n, n)) * (rng.random((H, n, n)) > sparsity)
        P[:, np.arange(n), np.arange(n)] += 0.05
        P /= P.sum(axis=2, keepdims=True)
        rho0 = rng.random(n)
        rho0 /= rho0.sum()
        return cls(P, rho0, rng.normal(size=n), alpha)


@dataclass
class TiltedChain:
    v: np.ndarray  # (H+1, n) soft values
    P: np.ndarray  # (H, n, n) tilted transitions
    rho0: np.ndarray
    log_C: float

    @property
    def C(self) -> float:
        return float(np.exp(self.log_C))

    def marginals(self) -> np.ndarray:
        out = [self.rho0]
        for Pt in self.P:
            out.append(out[-1] @ Pt)
        return np.array(out)


def soft_value_backward(chain: DiscreteChain) -> np.ndarray:
    """v_H = r; exp(v_t/alpha) = P_t exp(v_{t+1}/alpha), in log space."""
    if not chain.alpha > 0:
        raise ValueError("alpha must be positive")
    a = chain.alpha
    v = [chain.r.copy()]
    for Pt in chain.P[::-1]:
        v.append(a * logsumexp(np.broadcast_to(v[-1] / a, Pt.shape), b=Pt, axis=1))
    return np.array(v[::-1])


def tilt_chain(chain: DiscreteChain) -> TiltedChain:
    a = chain.alpha
    v = soft_value_backward(chain)
    Pstar = np.empty_like(chain.P)
    for t, Pt in enumerate(chain.P):
        Pstar[t] = Pt * np.exp(v[t + 1][None, :] / a - v[t][:, None] / a)
    logits = np.where(chain.rho0 > 0, np.log(np.where(chain.rho0 > 0, chain.rho0, 1.0)), -np.inf) + v[0] / a
    log_C = float(logsumexp(logits))
    return TiltedChain(v, Pstar, np.exp(logits - log_C), log_C)


def _kl(p, q) -> float:
    m = p > 0
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


def _enumerate_paths(rho0, P):
    """Probabilities of every path x_0..x_H, shape (n,)*(H+1)."""
    prob = rho0.copy()
    for Pt in P:
        prob = prob[..., None] * Pt.reshape((1,) * (prob.ndim - 1) + Pt.shape)
    return prob


IDENTITIES = (
    "tilted_rows_stochastic",
    "marginal_identity",
    "terminal_law",
    "optimal_initial",
    "normalizer_t_independence",
    "joint_identity",
    "conditional_identity",
    "path_kl",
    "path_kl_decomposition",
    "bridge_enumeration",
)


def verify_identities(chain: DiscreteChain, tilted: TiltedChain, bridge_max_paths: int = 200_000) -> dict:
    """Maximum absolute deviation per identity, computed by exact linear algebra."""
    a, H = chain.alpha, chain.H
    v = tilted.v
    base = chain.marginals()
    star = tilted.marginals()
    C = tilted.C
    report = {}

    report["tilted_rows_stochastic"] = float(np.max(np.abs(tilted.P.sum(axis=2) - 1))) if H else 0.0

    # P*_t = exp(v_t/alpha) P^data_t / C at every t
    pred = np.exp(v / a) * base / C
    report["marginal_identity"] = float(np.max(np.abs(star - pred)))

    # terminal law is the tilted data law
    term = np.exp(chain.r / a) * base[-1]
    report["terminal_law"] = float(np.max(np.abs(star[-1] - term / term.sum())))

    # nu* attains the variational optimum alpha log C of E[v_0] - alpha KL(. || rho0)
    rho = tilted.rho0
    val = float(rho @ v[0]) - a * _kl(rho, chain.rho0)
    report["optimal_initial"] = max(float(np.max(np.abs(rho - np.exp(v[0] / a) * chain.rho0 / C))),
                                    abs(val - a * tilted.log_C))

    Ct = np.array([np.sum(np.exp(v[t] / a) * base[t]) for t in range(H + 1)])
    report["normalizer_t_independence"] = float(np.max(np.abs(Ct - C)))

    # joint and backward conditional laws for every s < t
    joint_dev, cond_dev = 0.0, 0.0
    for s in range(H + 1):
        Kb = np.eye(chain.n)
        Ks = np.eye(chain.n)
        for t in range(s + 1, H + 1):
            Kb = Kb @ chain.P[t - 1]
            Ks = Ks @ tilted.P[t - 1]
            Jb = base[s][:, None] * Kb
            Js = star[s][:, None] * Ks
            joint_dev = max(joint_dev, float(np.max(np.abs(Js - Jb * np.exp(v[t] / a)[None, :] / C))))
            mb, ms = Jb.sum(axis=0), Js.sum(axis=0)
            ok = (mb > 1e-300) & (ms > 1e-300)
            if np.any(ok):
                cond_dev = max(cond_dev, float(np.max(np.abs(Js[:, ok] / ms[ok] - Jb[:, ok] / mb[ok]))))
    report["joint_identity"] = joint_dev
    report["conditional_identity"] = cond_dev

    # path KL via the chain rule vs E*[r]/alpha - log C
    kl = _kl(tilted.rho0, chain.rho0)
    for t in range(H):
        Pt, Qt = tilted.P[t], chain.P[t]
        per_state = np.array([_kl(Pt[i], Qt[i]) for i in range(chain.n)])
        kl += float(star[t] @ per_state)
    target = float(star[-1] @ chain.r) / a - tilted.log_C
    report["path_kl"] = abs(kl - target)
    # path KL = terminal KL + expected bridge KL, and the bridge KL is zero
    report["path_kl_decomposition"] = abs(kl - _kl(star[-1], base[-1]))

    if chain.n ** (H + 1) <= bridge_max_paths:
        pb = _enumerate_paths(chain.rho0, chain.P)
        ps = _enumerate_paths(tilted.rho0, tilted.P)
        full = np.abs(ps - pb * np.exp(chain.r / a) / C)
        mb = pb.reshape(-1, chain.n).sum(axis=0)
        ms = ps.reshape(-1, chain.n).sum(axis=0)
        ok = (mb > 1e-300) & (ms > 1e-300)
        bb = pb.reshape(-1, chain.n)[:, ok] / mb[ok]
        bs = ps.reshape(-1, chain.n)[:, ok] / ms[ok]
        report["bridge_enumeration"] = max(float(np.max(full)), float(np.max(np.abs(bb - bs))) if ok.any() else 0.0)
    else:
        report["bridge_enumeration"] = None
    return report


# ---------------------------------------------------------------------------
# continuous closed forms: Gaussian mixture data, linear reward
# ---------------------------------------------------------------------------

def _check_linear(reward):
    if not isinstance(reward, LinearReward):
        raise TypeError("closed-form oracles need a linear reward")


def _tilted_terms(model: PretrainedModel, reward: LinearReward, alpha: float, s: float, x):
    """Per-component log terms of E[exp(r(y_0)/alpha) | y_s = x] and their x-gradients."""
    x = np.atleast_2d(x)
    gm = model.data
    lam = reward.b / alpha
    a = np.exp(-0.5 * s)
    beta = -np.expm1(-s)
    marg = forward_marginal(gm, s)
    S = marg.variances
    logprior = marg._component_logpdf(x) + np.log(gm.weights)  # (B, K)
    _, means, pvar = posterior_params(gm, s, x)
    logmgf = means @ lam + 0.5 * (lam @ lam) * pvar[None]  # (B, K)
    g0 = -(x[:, None, :] - marg.means[None]) / S[None, :, None]  # (B, K, d)
    gmgf = (pvar * a / beta)[None, :, None] * lam[None, None, :]
    return logprior, logmgf, g0, gmgf


def analytic_value(model: PretrainedModel, reward: LinearReward, alpha: float, t: float, x) -> np.ndarray:
    """v*_t(x) = alpha log E[exp(r(x_T)/alpha) | x_t = x] under the exact reverse process."""
    _check_linear(reward)
    x = np.atleast_2d(x)
    s = model.horizon - t
    if s <= 0:
        return reward(x)
    lp, lm, _, _ = _tilted_terms(model, reward, alpha, s, x)
    return alpha * (logsumexp(lp + lm, axis=1) - logsumexp(lp, axis=1)) + reward.c


def analytic_optimal_drift(model: PretrainedModel, reward: LinearReward, alpha: float, t: float, x) -> np.ndarray:
    """sigma^2(t) grad_x v*_t(x) / alpha."""
    _check_linear(reward)
    x = np.atleast_2d(x)
    sig2 = model.sigma(t) ** 2
    s = model.horizon - t
    if s <= 0:
        return sig2 * np.broadcast_to(reward.b / alpha, x.shape).copy()
    lp, lm, g0, gm = _tilted_terms(model, reward, alpha, s, x)
    w_t = np.exp(lp + lm - logsumexp(lp + lm, axis=1, keepdims=True))
    w_0 = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    grad = np.einsum("bk,bkd->bd", w_t, g0 + gm) - np.einsum("bk,bkd->bd", w_0, g0)
    return sig2 * grad


def conditional_mean_reward(model: PretrainedModel, reward: LinearReward, t: float, x):
    """E[r(x_T) | x_t = x] and its x-gradient."""
    _check_linear(reward)
    x = np.atleast_2d(x)
    s = model.horizon - t
    if s <= 0:
        return reward(x), reward.grad(x)
    gm = model.data
    a = np.exp(-0.5 * s)
    beta = -np.expm1(-s)
    w, means, pvar = posterior_params(gm, s, x)
    marg = forward_marginal(gm, s)
    mk = means @ reward.b  # (B, K)
    g = -(x[:, None, :] - marg.means[None]) / marg.variances[None, :, None]
    gbar = np.einsum("bk,bkd->bd", w, g)
    dm = (pvar * a / beta)[None, :, None] * reward.b[None, None, :]
    grad = np.einsum("bk,bkd->bd", w, dm) + np.einsum("bk,bkd->bd", w * mk, g - gbar[:, None, :])
    return np.sum(w * mk, axis=1) + reward.c, grad


@dataclass
class OptimalInitial:
    grid: QuadGrid
    density: np.ndarray
    log_normalizer: float  # log of the integral of exp(v*_0/alpha) nu_ini
    gaussian: GaussianMixture | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.gaussian is not None:
            return self.gaussian.sample(n, rng)
        p = self.density * self.grid.weights
        idx = rng.choice(len(p), size=n, p=p / p.sum())
        return self.grid.points[idx]


def analytic_optimal_initial(model: PretrainedModel, reward: LinearReward, alpha: float,
                             grid: QuadGrid | None = None) -> OptimalInitial:
    """nu*(x) proportional to exp(v*_0(x)/alpha) nu_ini(x), normalised by quadrature."""
    _check_linear(reward)
    grid = grid or QuadGrid.default(model.dim)
    logu = analytic_value(model, reward, alpha, 0.0, grid.points) / alpha + standard_normal(model.dim).log_density(grid.points)
    shift = logu.max()
    u = np.exp(logu - shift)
    z = grid.integrate(u)
    gauss = None
    gm = model.data
    if gm.n_components == 1:
        # v*_0 is affine in x, so the tilt of N(0, I) is a mean shift
        s = model.horizon
        a, beta = np.exp(-0.5 * s), -np.expm1(-s)
        pvar = 1.0 / (1.0 / gm.variances[0] + a * a / beta)
        shift_vec = pvar * a / beta * reward.b / alpha
        gauss = GaussianMixture(np.ones(1), shift_vec[None], np.ones(1))
    return OptimalInitial(grid, u / z, float(np.log(z) + shift), gauss)


def continuous_normalizers(model: PretrainedModel, reward: LinearReward, alpha: float, times,
                           grid: QuadGrid | None = None) -> np.ndarray:
    """log of the integral of exp(v*_t/alpha) Q_{T-t} at each t; constant in t."""
    grid = grid or QuadGrid.default(model.dim)
    out = []
    for t in times:
        lv = analytic_value(model, reward, alpha, t, grid.points) / alpha + model.marginal(t).log_density(grid.points)
        m = lv.max()
        out.append(np.log(grid.integrate(np.exp(lv - m))) + m)
    return np.array(out)


def hjb_residual(model: PretrainedModel, reward: LinearReward, alpha: float, t: float, xs, h: float) -> np.ndarray:
    """Finite-difference residual of the HJB equation for v*_t (d = 1).

    Fourth-order five-point stencils keep the truncation error at O(h^4).
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 1)
    v = lambda tt, xx: analytic_value(model, reward, alpha, tt, xx)
    v0 = v(t, xs)
    vp1, vm1, vp2, vm2 = v(t, xs + h), v(t, xs - h), v(t, xs + 2 * h), v(t, xs - 2 * h)
    vx = (8 * (vp1 - vm1) - (vp2 - vm2)) / (12 * h)
    vxx = (16 * (vp1 + vm1) - (vp2 + vm2) - 30 * v0) / (12 * h * h)
    vt = (8 * (v(t + h, xs) - v(t - h, xs)) - (v(t + 2 * h, xs) - v(t - 2 * h, xs))) / (12 * h)
    sig2 = model.sigma(t) ** 2
    f = model.reverse_drift(t, xs)[:, 0]
    return 0.5 * sig2 * vxx + f * vx + vt + sig2 * vx ** 2 / (2 * alpha)


def run_discrete_suite(n_chains: int = 50, n: int = 20, H: int = 10, small_chains: int = 5,
                       seed: int = 0, corrupt: float = 0.0) -> dict:
    """Worst deviation per identity over seeded random chains plus small enumerable ones."""
    worst: dict[str, float] = {k: 0.0 for k in IDENTITIES}
    configs = [(n, H, seed + i) for i in range(n_chains)]
    configs += [(6, 5, seed + 10_000 + i) for i in range(small_chains)]
    for nn, hh, sd in configs:
        chain = DiscreteChain.random(nn, hh, sd, alpha=[0.25, 0.5, 1.0, 2.0][sd % 4])
        tilted = tilt_chain(chain)
        if corrupt:
            tilted.P[0, 0, 0] += corrupt
        rep = verify_identities(chain, tilted)
        for k, val in rep.items():
            if val is not None:
                worst[k] = max(worst[k], val)
    return worst
