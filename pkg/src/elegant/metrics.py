"""Evaluation: mean rewards, path KL, diversity and Wasserstein distances."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import wasserstein_distance

from .control import SampleResult
from .pretrained import GaussianMixture
from .rewards import Reward, TiltedTarget

N_BOOTSTRAP = 200
MAX_PAIRS = 100_000
N_PROJECTIONS = 32


def bootstrap_se(values, seed: int = 0, n_boot: int = N_BOOTSTRAP, stat=np.mean) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    return float(np.std([stat(values[i]) for i in idx], ddof=1))


def _pairs(n: int, seed: int, max_pairs: int):
    total = n * (n - 1) // 2
    if total <= max_pairs:
        return np.triu_indices(n, k=1)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=max_pairs)
    j = rng.integers(0, n - 1, size=max_pairs)
    j = j + (j >= i)  # distinct partner
    return i, j


def diversity(samples, seed: int = 0, max_pairs: int = MAX_PAIRS) -> float:
    """Mean Euclidean distance over unordered distinct pairs."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise ValueError("diversity needs at least two samples")
    i, j = _pairs(len(x), seed, max_pairs)
    return float(np.mean(np.linalg.norm(x[i] - x[j], axis=1)))


def diversity_se(samples, seed: int = 0, max_anchor: int = 2000) -> float:
    """Standard error of the pairwise-distance U-statistic, 2 std(h1) / sqrt(n).

    h1(x) = E|x - Z| is estimated against a seeded subsample of at most
    ``max_anchor`` points.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    n = len(x)
    if n < 3:
        return 0.0
    rng = np.random.default_rng(seed)
    anchors = x[rng.choice(n, size=min(n, max_anchor), replace=False)]
    rows = x[rng.choice(n, size=min(n, max_anchor), replace=False)]
    h1 = np.mean(np.linalg.norm(rows[:, None, :] - anchors[None], axis=2), axis=1)
    return float(2 * np.std(h1, ddof=1) / np.sqrt(n))


def _cdf_target(target):
    if isinstance(target, (GaussianMixture, TiltedTarget)):
        return target.cdf
    if callable(target):
        return target
    return None


def wasserstein1_1d(samples, target, lo: float = -12.0, hi: float = 12.0, n_grid: int = 24001) -> float:
    """W1 between the empirical law of ``samples`` and ``target`` (d = 1).

    ``target`` is a 1-D GaussianMixture, a TiltedTarget, a CDF callable, a
    (grid, density) pair, or another sample array.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("wasserstein1_1d needs one-dimensional samples; use sliced_wasserstein1 for d > 1")
        x = x[:, 0]
    if isinstance(target, GaussianMixture) and target.dim != 1:
        raise ValueError("target is multi-dimensional; use sliced_wasserstein1")
    if isinstance(target, tuple):
        pts, dens = (np.asarray(a, dtype=np.float64).reshape(-1) for a in target)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(pts))])
        cdf = lambda z: np.interp(z, pts, cum / cum[-1])  # noqa: E731
    else:
        cdf = _cdf_target(target)
    if cdf is None:
        y = np.asarray(target, dtype=np.float64).reshape(-1)
        return float(wasserstein_distance(x, y))
    lo, hi = min(lo, x.min() - 1.0), max(hi, x.max() + 1.0)
    grid = np.linspace(lo, hi, n_grid)
    ecdf = np.searchsorted(np.sort(x), grid, side="right") / len(x)
    return float(np.trapezoid(np.abs(ecdf - cdf(grid)), grid))


def sliced_wasserstein1(samples, target: GaussianMixture, seed: int = 0, n_proj: int = N_PROJECTIONS) -> float:
    """Average 1-D W1 over seeded random unit directions."""
    x = np.asarray(samples, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein1_1d(x @ u, target.project(u)) for u in dirs]))


def distance_to_target(samples, target) -> float:
    x = np.asarray(samples).reshape(len(samples), -1)
    if x.shape[1] == 1:
        return wasserstein1_1d(x, target)
    gm = target.mixture if isinstance(target, TiltedTarget) else target
    if gm is None:
        raise ValueError("sliced distance needs a closed-form target")
    return sliced_wasserstein1(x, gm)


@dataclass
class PathKL:
    stage2: float
    stage2_se: float
    stage1_bound: float
    stage1_bound_se: float

    @property
    def total(self) -> float:
        return self.stage2 + self.stage1_bound


def kl_path_metric(result: SampleResult, seed: int = 0) -> PathKL:
    """Monte Carlo path KL: the stage-2 Girsanov term and the stage-1 bound on KL(nu_hat || nu_ini)."""
    k2 = np.asarray(result.kl_stage2)
    k1 = np.zeros_like(k2) if result.kl_stage1 is None else np.asarray(result.kl_stage1)
    return PathKL(float(k2.mean()), bootstrap_se(k2, seed), float(k1.mean()), bootstrap_se(k1, seed + 1))


@dataclass
class EvalReport:
    n: int
    seed: int
    reward: float
    reward_se: float
    kl_stage2: float
    kl_stage2_se: float
    kl_stage1_bound: float
    kl_stage1_bound_se: float
    kl_total: float
    diversity: float
    diversity_se: float
    genuine_reward: float | None = None
    genuine_reward_se: float | None = None
    w1_target: float | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("reward", "reward_se", "kl_stage2", "kl_stage1_bound", "diversity"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite statistic {name}")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(result: SampleResult, reward: Reward, genuine: Reward | None = None, target=None,
             seed: int = 0, config_hash: str | None = None) -> EvalReport:
    if result.n < 2:
        raise ValueError("evaluation needs at least two samples")
    x = result.terminal
    r = reward(x)
    kl = kl_path_metric(result, seed)
    rep = EvalReport(
        n=result.n, seed=seed, reward=float(r.mean()), reward_se=bootstrap_se(r, seed),
        kl_stage2=kl.stage2, kl_stage2_se=kl.stage2_se,
        kl_stage1_bound=kl.stage1_bound, kl_stage1_bound_se=kl.stage1_bound_se, kl_total=kl.total,
        diversity=diversity(x, seed), diversity_se=diversity_se(x, seed), config_hash=config_hash)
    if genuine is not None:
        g = genuine(x)
        rep.genuine_reward, rep.genuine_reward_se = float(g.mean()), bootstrap_se(g, seed + 2)
    if target is not None:
        rep.w1_target = distance_to_target(x, target)
    return rep


# ---------------------------------------------------------------------------
# histograms and plots
# ---------------------------------------------------------------------------

def histogram(values, bins: int = 40, range_=None):
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=range_)
    return counts, edges


def write_histogram_csv(path, counts, edges) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["left", "right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return path


PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def write_histogram_svg(path, series: dict[str, tuple], title: str = "", width: int = 480,
                        height: int = 300) -> Path:
    """Overlaid bar histograms; ``series`` maps label -> (counts, edges) on shared edges."""
    path = Path(path)
    pad = 40
    all_edges = np.concatenate([e for _, e in series.values()])
    lo, hi = float(all_edges.min()), float(all_edges.max())
    top = max(1, max(int(np.max(c)) for c, _ in series.values()))
    sx = lambda v: pad + (v - lo) / (hi - lo or 1.0) * (width - 2 * pad)  # noqa: E731
    sy = lambda c: height - pad - c / top * (height - 2 * pad)  # noqa: E731
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{pad}" y="{height - pad + 15}" font-size="10">{lo:.3g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 15}" font-size="10" text-anchor="end">{hi:.3g}</text>']
    for n, (label, (counts, edges)) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        for c, a, b in zip(counts, edges[:-1], edges[1:]):
            if c:
                parts.append(f'<rect x="{sx(a):.2f}" y="{sy(c):.2f}" width="{sx(b) - sx(a):.2f}" '
                             f'height="{sy(0) - sy(c):.2f}" fill="{color}" fill-opacity="0.45"/>')
        parts.append(f'<text x="{width - pad}" y="{35 + 14 * n}" font-size="11" text-anchor="end" '
                     f'fill="{color}">{label}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def write_table_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    cols = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path
