"""Command-line front end: finetune, evaluate, sweep, oracle-check, sample.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 oracle
threshold breach.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, oracle
from .autodiff import ParamSet
from .config import ConfigError, ExperimentConfig
from .control import (DriftNet, FineTunedModel, SampleResult, TimeRewardModel, elegant_finetune,
                      fit_time_reward_model, guidance_sampler, naive_drift_sampler, pretrained_sampler,
                      sample_controlled, sample_finetuned, train_no_kl)
from .metrics import EvalReport, evaluate, histogram, write_histogram_csv, write_histogram_svg, write_table_csv
from .nets import MLP, FitLog
from .pretrained import PretrainedModel
from .rewards import LinearReward, NetReward, QuadGrid, TiltedTarget, fit_nominal_reward, truncated_dataset
from .sde import derive_seed

log = logging.getLogger("elegant")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 0, 2, 3, 4
MANIFEST = "manifest.json"

# thresholds for the oracle suite
DISCRETE_TOL = 1e-10
NORMALIZER_TOL = 1e-8
HJB_TOL = 1e-5
DRIFT_TOL = 1e-6


class ArtifactMissing(FileNotFoundError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    method: str
    out_dir: Path
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def add(self, name: str, path) -> None:
        self.artifacts[name] = str(Path(path).relative_to(self.out_dir))

    def path(self, name: str) -> Path:
        if name not in self.artifacts:
            raise ArtifactMissing(f"manifest has no artifact {name!r}")
        p = self.out_dir / self.artifacts[name]
        if not p.exists():
            raise ArtifactMissing(f"artifact {name!r} missing at {p}")
        return p

    def save(self) -> Path:
        d = {"config_hash": self.config_hash, "method": self.method, "artifacts": dict(sorted(self.artifacts.items())),
             "timings": self.timings, "version": self.version}
        p = self.out_dir / MANIFEST
        p.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return p

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        if not path.exists():
            raise ArtifactMissing(f"manifest {path} not found")
        d = json.loads(path.read_text())
        return cls(d["config_hash"], d["method"], path.parent, d["artifacts"], d.get("timings", {}),
                   d.get("version", __version__))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: ExperimentConfig, seed: int | None = None, n: int | None = None) -> ExperimentConfig:
    if seed is not None:
        cfg.seed = seed
        cfg.stage1.seed = derive_seed(seed, "stage1") % 2**31
        cfg.stage2.seed = derive_seed(seed, "stage2") % 2**31
        cfg.value.seed = derive_seed(seed, "value") % 2**31
    if n is not None:
        if n < 2:
            raise ConfigError("--n-override", "need at least two samples")
        cfg.eval.n = n
    return cfg


def build_rewards(cfg: ExperimentConfig, out_dir: Path | None = None, manifest: RunManifest | None = None):
    """(nominal reward, genuine reward or None)."""
    rs = cfg.reward
    genuine = rs.genuine.build() if rs.genuine is not None else None
    if rs.kind != "fitted":
        return rs.analytic(), genuine
    if manifest is not None and "nominal_reward" in manifest.artifacts:
        d = json.loads(manifest.path("nominal_reward").read_text())
        net = MLP(tuple(d["sizes"]), ParamSet.from_dict(d["params"]), d["activation"])
        return NetReward(net), genuine
    model = cfg.model.build()
    ns = rs.nominal
    X, y = truncated_dataset(model.data, genuine, ns.n, ns.seed, ns.upper, ns.component)
    nominal, _ = fit_nominal_reward(X, y, ns.fit_config())
    if out_dir is not None:
        p = out_dir / "nominal_reward.json"
        p.write_text(json.dumps({"sizes": list(nominal.net.sizes), "activation": nominal.net.activation,
                                 "params": nominal.net.params.to_dict()}, sort_keys=True))
        manifest.add("nominal_reward", p)
    return nominal, genuine


def analytic_target(cfg: ExperimentConfig, model: PretrainedModel, reward):
    if not cfg.eval.target or model.dim > 2:
        return None
    if isinstance(reward, LinearReward):
        return TiltedTarget(model.data, reward, cfg.method.alpha)
    if model.dim == 1:
        return TiltedTarget(model.data, reward, cfg.method.alpha, QuadGrid.line(-12, 12, 6001))
    return None


def _save_params(manifest: RunManifest, name: str, obj) -> None:
    manifest.add(name, obj.save(manifest.out_dir / f"{name}.json"))


def _truncation_point(cfg: ExperimentConfig) -> float:
    return cfg.method.truncate_at if cfg.method.truncate_at is not None else 0.8 * cfg.model.horizon


def run_method(cfg: ExperimentConfig, out_dir: Path) -> RunManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.config_hash(), cfg.method.name, out_dir)
    manifest.add("config", cfg.save(out_dir / "config.toml"))
    t0 = time.perf_counter()
    model = cfg.model.build()
    reward, _ = build_rewards(cfg, out_dir, manifest)
    manifest.timings["reward"] = time.perf_counter() - t0
    m, alpha, n_steps = cfg.method, cfg.method.alpha, cfg.model.n_steps
    t1 = time.perf_counter()
    if m.name == "elegant":
        ft = elegant_finetune(model, reward, alpha, cfg.stage1.build(alpha, n_steps),
                              cfg.stage2.build(alpha, n_steps), cfg.value.build(), seed=cfg.seed)
        manifest.add("value_net", ft.value.net.params.save(out_dir / "value_net.json"))
        _save_params(manifest, "stage1_drift", ft.q)
        _save_params(manifest, "stage2_drift", ft.u)
        p = out_dir / "training_log.json"
        p.write_text(json.dumps(ft.logs, sort_keys=True) + "\n")
        manifest.add("training_log", p)
    elif m.name in ("no_kl", "truncation", "random_k"):
        u, tl = train_no_kl(model, reward, cfg.stage2.build(alpha, n_steps),
                            truncate_at=_truncation_point(cfg) if m.name == "truncation" else None,
                            random_k=m.name == "random_k")
        _save_params(manifest, "stage2_drift", u)
        p = out_dir / "training_log.json"
        p.write_text(json.dumps({"stage2": tl.epoch_loss}, sort_keys=True) + "\n")
        manifest.add("training_log", p)
    elif m.name == "guidance":
        probes = np.linspace(0.0, model.horizon, m.guidance_probes + 1)[:-1]
        fit = cfg.value.build().fit
        tm = fit_time_reward_model(model, reward, probes, m.guidance_rollouts, tuple(cfg.value.hidden), fit,
                                   n_steps, seed=cfg.seed)
        p = out_dir / "time_reward_net.json"
        p.write_text(json.dumps({"sizes": list(tm.net.sizes), "activation": tm.net.activation,
                                 "params": tm.net.params.to_dict()}, sort_keys=True))
        manifest.add("time_reward_net", p)
    manifest.timings["train"] = time.perf_counter() - t1
    manifest.save()
    return manifest


def build_sampler(cfg: ExperimentConfig, manifest: RunManifest):
    """Callable (count, seed) -> SampleResult for the method in the manifest."""
    model = cfg.model.build()
    reward, _ = build_rewards(cfg, manifest=manifest)
    m, n_steps = cfg.method, cfg.model.n_steps
    if m.name == "pretrained":
        return lambda count, seed: pretrained_sampler(model, count, seed, n_steps)
    if m.name == "naive":
        return lambda count, seed: naive_drift_sampler(model, reward, m.alpha, count, seed, n_steps)
    if m.name == "elegant":
        ft = FineTunedModel(model, m.alpha, DriftNet.load(manifest.path("stage1_drift")),
                            DriftNet.load(manifest.path("stage2_drift")), n_steps=n_steps)
        return lambda count, seed: sample_finetuned(ft, count, seed)
    if m.name in ("no_kl", "truncation", "random_k"):
        u = DriftNet.load(manifest.path("stage2_drift"))
        return lambda count, seed: sample_controlled(model, u, model.initial_sampler(), count, seed, n_steps)
    if m.name == "guidance":
        d = json.loads(manifest.path("time_reward_net").read_text())
        tm = TimeRewardModel(MLP(tuple(d["sizes"]), ParamSet.from_dict(d["params"]), d["activation"]), FitLog())
        return lambda count, seed: guidance_sampler(model, tm, m.gamma, m.y_con, m.sigma_g, count, seed, n_steps)
    raise ConfigError("method.name", f"unknown method {m.name!r}")


def evaluate_run(cfg: ExperimentConfig, manifest: RunManifest) -> tuple[EvalReport, SampleResult]:
    t0 = time.perf_counter()
    model = cfg.model.build()
    reward, genuine = build_rewards(cfg, manifest=manifest)
    sampler = build_sampler(cfg, manifest)
    res = sampler(cfg.eval.n, cfg.eval.seed)
    target = analytic_target(cfg, model, reward)
    rep = evaluate(res, reward, genuine, target, seed=cfg.eval.seed, config_hash=cfg.config_hash())
    out = manifest.out_dir
    manifest.add("report", rep.save(out / "report.json"))
    series = {"nominal r": reward(res.terminal)}
    if genuine is not None:
        series["genuine r*"] = genuine(res.terminal)
    lo = min(float(np.min(v)) for v in series.values())
    hi = max(float(np.max(v)) for v in series.values())
    hists = {}
    for label, vals in series.items():
        counts, edges = histogram(vals, cfg.eval.bins, (lo, hi + 1e-12))
        slug = "reward_nominal" if label.startswith("nominal") else "reward_genuine"
        manifest.add(f"hist_{slug}", write_histogram_csv(out / f"hist_{slug}.csv", counts, edges))
        hists[label] = (counts, edges)
    manifest.add("hist_rewards_svg", write_histogram_svg(out / "hist_rewards.svg", hists, "reward histograms"))
    if model.dim == 1:
        counts, edges = histogram(res.terminal[:, 0], cfg.eval.bins)
        manifest.add("hist_samples", write_histogram_csv(out / "hist_samples.csv", counts, edges))
    manifest.timings["evaluate"] = time.perf_counter() - t0
    manifest.save()
    return rep, res


def table_row(label: str, rep: EvalReport) -> dict:
    return {"method": label, "Reward(r)": rep.reward, "Reward(r*)": rep.genuine_reward if rep.genuine_reward is not None else "",
            "KL-Div": rep.kl_total, "Div": rep.diversity,
            "W1": rep.w1_target if rep.w1_target is not None else ""}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_cfg(args) -> ExperimentConfig:
    return _apply_overrides(ExperimentConfig.load(args.config), args.seed_override, args.n_override)


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out_dir or f"runs/{cfg.name}")
    manifest = run_method(cfg, out)
    print(json.dumps({"manifest": str(out / MANIFEST), "config_hash": manifest.config_hash}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rows = []
    for mpath in args.manifest:
        manifest = RunManifest.load(mpath)
        cfg = _apply_overrides(ExperimentConfig.load(manifest.path("config")), None, args.n_override)
        if args.seed_override is not None:
            cfg.eval.seed = args.seed_override
        rep, _ = evaluate_run(cfg, manifest)
        rows.append(table_row(cfg.method.name, rep))
        print(json.dumps(rep.to_dict(), sort_keys=True))
    if len(rows) > 1:
        out = Path(args.out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        write_table_csv(out / "comparison.csv", rows)
    return EXIT_OK


def _reusable(cfg: ExperimentConfig, out_dir: Path) -> RunManifest | None:
    """A finished run in ``out_dir`` with the same config hash and every artifact present."""
    try:
        manifest = RunManifest.load(out_dir)
        for name in manifest.artifacts:
            manifest.path(name)
    except (ArtifactMissing, KeyError, json.JSONDecodeError):
        return None
    if manifest.config_hash != cfg.config_hash() or "train" not in manifest.timings:
        return None
    log.info("reusing finished run in %s", out_dir)
    return manifest


def run_sweep(cfg: ExperimentConfig, out: Path) -> list[dict]:
    rows, hists = [], {}
    for alpha in cfg.sweep.alphas:
        sub = dataclasses.replace(cfg, method=dataclasses.replace(cfg.method, alpha=float(alpha)),
                                  sweep=dataclasses.replace(cfg.sweep, alphas=[]))
        label = f"alpha={alpha:g}"
        try:
            manifest = _reusable(sub, out / f"alpha_{alpha:g}") or run_method(sub, out / f"alpha_{alpha:g}")
            rep, res = evaluate_run(sub, manifest)
            rows.append({"alpha": float(alpha), "status": "ok", **table_row(label, rep)})
            hists[label] = res.terminal[:, 0] if res.terminal.shape[1] == 1 else None
        except Exception as exc:  # noqa: BLE001
            log.error("sweep %s failed: %s", label, exc)
            rows.append({"alpha": float(alpha), "status": f"failed: {exc}", "method": label, "Reward(r)": "",
                         "Reward(r*)": "", "KL-Div": "", "Div": "", "W1": ""})
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: -r["alpha"])
    trends = {
        "reward_nondecreasing_as_alpha_decreases": all(a["Reward(r)"] <= b["Reward(r)"] for a, b in zip(ok, ok[1:])),
        "div_nonincreasing_as_alpha_decreases": all(a["Div"] >= b["Div"] for a, b in zip(ok, ok[1:])),
    }
    write_table_csv(out / "sweep.csv", rows)
    (out / "sweep.json").write_text(json.dumps({"rows": rows, "trends": trends}, indent=2, sort_keys=True) + "\n")
    valid = {k: v for k, v in hists.items() if v is not None}
    if valid:
        lo = min(v.min() for v in valid.values())
        hi = max(v.max() for v in valid.values())
        write_histogram_svg(out / "sweep_hist.svg",
                            {k: histogram(v, cfg.eval.bins, (lo, hi)) for k, v in valid.items()}, "terminal samples")
    return rows


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.sweep.alphas:
        raise ConfigError("sweep.alphas", "empty alpha list")
    out = Path(args.out_dir or f"runs/{cfg.name}_sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(cfg, out)
    print(json.dumps({"sweep": str(out / "sweep.csv"), "ok": sum(r["status"] == "ok" for r in rows)}))
    return EXIT_OK


def oracle_check(corrupt: float = 0.0, n_chains: int = 50, seed: int = 0) -> dict:
    """Run every oracle identity; returns the report with a pass flag per check."""
    from .pretrained import canonical_mixture
    checks = {}
    worst = oracle.run_discrete_suite(n_chains=n_chains, seed=seed, corrupt=corrupt)
    for name, dev in worst.items():
        checks[f"discrete.{name}"] = {"deviation": dev, "threshold": DISCRETE_TOL}
    model = PretrainedModel(canonical_mixture())
    xs = np.linspace(-3, 3, 25)[:, None]
    for b, alpha in ((1.0, 1.0), (-0.5, 0.25), (2.0, 4.0)):
        r = LinearReward([b])
        lc = oracle.continuous_normalizers(model, r, alpha, np.linspace(0, model.horizon, 6))
        checks[f"continuous.normalizer_t_independence[b={b:g},alpha={alpha:g}]"] = {
            "deviation": float(np.max(np.abs(lc - lc[0]))), "threshold": NORMALIZER_TOL}
        tgt = TiltedTarget(model.data, r, alpha)
        checks[f"continuous.normalizer_vs_target[b={b:g},alpha={alpha:g}]"] = {
            "deviation": float(abs(lc[0] - tgt.log_normalizer)), "threshold": NORMALIZER_TOL}
        res = max(float(np.max(np.abs(oracle.hjb_residual(model, r, alpha, t, xs, 2e-3)))) for t in (0.5, 2.5, 4.5))
        checks[f"continuous.hjb_residual[b={b:g},alpha={alpha:g}]"] = {"deviation": res, "threshold": HJB_TOL}
        h = 1e-5
        dev = 0.0
        for t in (0.5, 2.5, 4.5):
            num = (oracle.analytic_value(model, r, alpha, t, xs + h) - oracle.analytic_value(model, r, alpha, t, xs - h)) / (2 * h)
            dev = max(dev, float(np.max(np.abs(num / alpha - oracle.analytic_optimal_drift(model, r, alpha, t, xs)[:, 0]))))
        checks[f"continuous.optimal_drift_gradient[b={b:g},alpha={alpha:g}]"] = {"deviation": dev, "threshold": DRIFT_TOL}
    for c in checks.values():
        c["pass"] = bool(c["deviation"] <= c["threshold"])
    return {"checks": checks, "pass": all(c["pass"] for c in checks.values()),
            "failed": sorted(k for k, c in checks.items() if not c["pass"])}


def cmd_oracle_check(args) -> int:
    rep = oracle_check(corrupt=args.inject_error)
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_report.json").write_text(text)
    print(text, end="")
    if not rep["pass"]:
        print(f"oracle identity failed: {', '.join(rep['failed'])}", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.manifest:
        manifest = RunManifest.load(args.manifest)
        cfg = ExperimentConfig.load(manifest.path("config"))
    elif args.config:
        cfg = ExperimentConfig.load(args.config)
        manifest = None
    else:
        raise ConfigError("", "sample needs --manifest or --config")
    cfg = _apply_overrides(cfg, None, args.n_override)
    seed = args.seed_override if args.seed_override is not None else cfg.eval.seed
    if manifest is None:
        if cfg.method.name not in ("pretrained", "naive"):
            raise ConfigError("method.name", "trained methods need --manifest from a finetune run")
        out = Path(args.out_dir or f"runs/{cfg.name}")
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(cfg.config_hash(), cfg.method.name, out)
        manifest.add("config", cfg.save(out / "config.toml"))
    res = build_sampler(cfg, manifest)(cfg.eval.n, seed)
    path = manifest.out_dir / "samples.csv"
    d = res.terminal.shape[1]
    np.savetxt(path, res.terminal, delimiter=",", header=",".join(f"x_{i + 1}" for i in range(d)),
               comments="", fmt="%.17g")
    manifest.add("samples", path)
    manifest.save()
    print(json.dumps({"samples": str(path), "n": int(res.n)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elegant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--seed-override", type=int, default=None)
        sp.add_argument("--n-override", type=int, default=None)

    common(sub.add_parser("finetune", help="train the configured method"))
    sp = sub.add_parser("evaluate", help="evaluate one or more finished runs")
    sp.add_argument("--manifest", action="append", required=True, help="run manifest (repeatable)")
    common(sp, config=False)
    common(sub.add_parser("sweep", help="fine-tune and evaluate over sweep.alphas"))
    sp = sub.add_parser("oracle-check", help="verify the exact oracle identities")
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--inject-error", type=float, default=0.0, help=argparse.SUPPRESS)
    sp = sub.add_parser("sample", help="dump terminal samples as CSV")
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--config", default=None)
    common(sp, config=False)
    return p


COMMANDS = {"finetune": cmd_finetune, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "oracle-check": cmd_oracle_check, "sample": cmd_sample}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
