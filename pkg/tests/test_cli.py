import json

import numpy as np
import pytest

from elegant.cli import EXIT_CONFIG, EXIT_ORACLE, RunManifest, _truncation_point, main, oracle_check
from elegant.config import ConfigError, ExperimentConfig

SMALL = """
schema_version = 1
name = "small"
seed = 3

[model]
n_steps = 20

[method]
name = "{method}"
alpha = 1.0

[value]
m = 32
n = 4
epochs = 5

[stage1]
batch = 16
epochs = 2
steps_per_epoch = 2
hidden = [8, 8]
lr = 1e-3

[stage2]
batch = 16
epochs = 2
steps_per_epoch = 2
hidden = [8, 8]
lr = 1e-3

[eval]
n = 200
bins = 10
"""


def write(tmp_path, method="elegant", extra=""):
    p = tmp_path / f"{method}.toml"
    p.write_text(SMALL.format(method=method) + extra)
    return p


def test_roundtrip_and_hash(tmp_path):
    cfg = ExperimentConfig.load(write(tmp_path))
    again = ExperimentConfig.from_toml(cfg.to_toml())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert cfg.stage1.lr == 1e-3 and cfg.model.horizon == 5.0


def test_default_config_roundtrip():
    cfg = ExperimentConfig().validate()
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg


@pytest.mark.parametrize("text,path", [
    ('schema_version = 2', "schema_version"),
    ('schema_version = 1\n[stage1]\nlrate = 0.1', "stage1.lrate"),
    ('schema_version = 1\ntypo = 1', "typo"),
    ('schema_version = 1\n[method]\nname = "ppo"', "method.name"),
    ('schema_version = 1\n[method]\nalpha = -1.0', "method.alpha"),
    ('schema_version = 1\n[stage2]\nbatch = "many"', "stage2.batch"),
    ('schema_version = 1\n[reward]\nkind = "fitted"', "reward"),
])
def test_config_errors_name_the_field(text, path):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_toml(text)
    assert exc.value.path == path


def test_truncation_default_point():
    cfg = ExperimentConfig.from_toml('schema_version = 1\n[method]\nname = "truncation"')
    assert cfg.method.truncate_at == 4.0
    # a method switched after validation still gets the default point
    plain = ExperimentConfig.from_toml("schema_version = 1")
    plain.method.name = "truncation"
    assert _truncation_point(plain) == 4.0


def test_exit_code_for_config_error(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("schema_version = 1\nbogus = true\n")
    assert main(["finetune", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_pretrained_run_and_evaluate(tmp_path, capsys):
    out = tmp_path / "pre"
    assert main(["finetune", "--config", str(write(tmp_path, "pretrained")), "--out-dir", str(out)]) == 0
    m = RunManifest.load(out)
    assert set(m.artifacts) == {"config"}
    assert main(["evaluate", "--manifest", str(out), "--n-override", "150"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["n"] == 150 and rep["kl_total"] == 0.0


def test_elegant_run_is_deterministic(tmp_path):
    cfg = write(tmp_path)
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["finetune", "--config", str(cfg), "--out-dir", str(o)]) == 0
        assert main(["evaluate", "--manifest", str(o)]) == 0
    ma, mb = (RunManifest.load(o) for o in outs)
    assert {"value_net", "stage1_drift", "stage2_drift"} <= set(ma.artifacts)
    assert ma.config_hash == mb.config_hash
    for name in ma.artifacts:
        assert (outs[0] / ma.artifacts[name]).read_bytes() == (outs[1] / mb.artifacts[name]).read_bytes(), name
    # every file in the run directory is referenced by the manifest
    files = {p.name for p in outs[0].iterdir()} - {"manifest.json"}
    assert files == set(ma.artifacts.values())


def test_comparison_table(tmp_path):
    dirs = []
    for method in ("pretrained", "naive"):
        o = tmp_path / method
        assert main(["finetune", "--config", str(write(tmp_path, method)), "--out-dir", str(o)]) == 0
        dirs += ["--manifest", str(o)]
    assert main(["evaluate", *dirs, "--out-dir", str(tmp_path)]) == 0
    header = (tmp_path / "comparison.csv").read_text().splitlines()[0]
    assert header == "method,Reward(r),Reward(r*),KL-Div,Div,W1"


def test_missing_artifact(tmp_path, capsys):
    o = tmp_path / "run"
    assert main(["finetune", "--config", str(write(tmp_path, "no_kl")), "--out-dir", str(o)]) == 0
    (o / "stage2_drift.json").unlink()
    assert main(["evaluate", "--manifest", str(o)]) == 3
    assert "stage2_drift" in capsys.readouterr().err


def test_sample_command(tmp_path):
    o = tmp_path / "s"
    assert main(["sample", "--config", str(write(tmp_path, "pretrained")), "--out-dir", str(o),
                 "--n-override", "25"]) == 0
    data = np.loadtxt(o / "samples.csv", delimiter=",", skiprows=1)
    assert data.shape == (25,)


def test_sweep_single_alpha(tmp_path):
    cfg = write(tmp_path, "naive", "\n[sweep]\nalphas = [2.0]\n")
    assert main(["sweep", "--config", str(cfg), "--out-dir", str(tmp_path / "sw")]) == 0
    rows = json.loads((tmp_path / "sw" / "sweep.json").read_text())["rows"]
    assert len(rows) == 1 and rows[0]["status"] == "ok"


def test_oracle_check_and_corruption(tmp_path, capsys):
    rep = oracle_check(n_chains=3)
    assert rep["pass"] and len(rep["checks"]) >= 6
    bad = oracle_check(corrupt=1e-6, n_chains=3)
    assert not bad["pass"] and bad["failed"]
    assert main(["oracle-check", "--inject-error", "1e-6"]) == EXIT_ORACLE
