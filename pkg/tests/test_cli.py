import csv
import json
import shutil
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from dlspf import cli
from dlspf.config import load_config, parse_config
from dlspf.metrics import METRIC_REPORT_SCHEMA
from dlspf.storage import read_tensor
from dlspf.wae import ConfigurationError, TrainingDivergenceError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = CONFIGS / "burgers_tiny.json"


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("simulate", "train-ae", "train-dyn"):
        assert run(cmd, "--config", TINY, "--out", out) == 0
    for mode in ("hf", "latent"):
        assert run("filter", "--mode", mode, "--config", TINY, "--out", out) == 0
    assert run("evaluate", "--config", TINY, "--out", out) == 0
    return out


def manifest(path):
    return json.loads(Path(path, "manifest.json").read_text())


def test_pipeline_outputs(pipeline):
    man = manifest(pipeline / "data")
    assert man["n_train"] == len(read_tensor(pipeline / "data" / "train.ltsf")) == 4
    assert man["config_hash"] == load_config(TINY).hash
    lat = read_tensor(pipeline / "dyn" / "latents.ltsf")
    assert lat.shape == (4, 41, 4)
    for mode in ("hf", "latent"):
        d = pipeline / f"filter-{mode}"
        ens = read_tensor(d / "ensembles.ltsf")
        assert ens.shape == (11, 20, 32)
        assert read_tensor(d / "percentiles.ltsf").shape == (3, 11, 32)
        timings = json.loads((d / "timings.json").read_text())
        assert set(timings["phases"]) == {"step", "decode", "weight", "resample"}
        assert len(manifest(d)["ess"]) == 10
    assert read_tensor(pipeline / "filter-latent" / "latents.ltsf").shape == (11, 20, 4)


def test_loss_csv_schema(pipeline):
    with open(pipeline / "ae" / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == ("epoch", "recon", "mmd", "consistency", "reg", "total")
    assert len(rows) == 21
    with open(pipeline / "dyn" / "loss.csv") as f:
        assert next(csv.reader(f)) == ["epoch", "loss"]


def test_reports_validate(pipeline):
    for mode in ("hf", "latent"):
        rep = json.loads((pipeline / "eval" / f"report-{mode}.json").read_text())
        jsonschema.validate(rep, METRIC_REPORT_SCHEMA)
    rep = json.loads((pipeline / "eval" / "report-latent.json").read_text())
    assert rep["amrmse"] is not None and "vs_hf" in rep["extra"]
    with open(pipeline / "eval" / "steps-hf.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "rmse"] and len(rows) == 12


def test_self_comparison_is_zero(pipeline):
    r = cli._load_run(pipeline / "filter-latent")
    cmp = cli.compare_runs(r, r)
    assert cmp == {"mean_rmse": 0.0, "amrmse": 0.0, "param_wasserstein1": 0.0}


def test_simulate_is_byte_identical(pipeline, tmp_path):
    assert run("simulate", "--config", TINY, "--out", tmp_path) == 0
    for name in ("train.ltsf", "test_obs.ltsf", "manifest.json"):
        assert (tmp_path / "data" / name).read_bytes() == (pipeline / "data" / name).read_bytes()


def test_seed_override_changes_data(pipeline, tmp_path):
    assert run("simulate", "--config", TINY, "--out", tmp_path, "--seed", 5) == 0
    assert manifest(tmp_path / "data")["seed"] == 5
    assert (tmp_path / "data" / "train.ltsf").read_bytes() != (pipeline / "data" / "train.ltsf").read_bytes()


def _copy_run(src, dst, *parts):
    for p in parts:
        shutil.copytree(src / p, dst / p)


@pytest.mark.parametrize("mode", ["hf", "latent"])
def test_filter_manifest_independent_of_workers(pipeline, tmp_path, mode, monkeypatch):
    _copy_run(pipeline, tmp_path, "data", "ae", "dyn")
    hashes = []
    for w in (1, 8):
        out = tmp_path / f"w{w}"
        _copy_run(tmp_path, out, "data", "ae", "dyn")
        monkeypatch.setenv("DLSPF_WORKERS", str(w))
        assert run("filter", "--mode", mode, "--config", TINY, "--out", out) == 0
        assert json.loads((out / f"filter-{mode}" / "timings.json").read_text())["workers"] == w
        hashes.append((out / f"filter-{mode}" / "manifest.json").read_bytes())
    assert hashes[0] == hashes[1]
    assert hashes[0] == (pipeline / f"filter-{mode}" / "manifest.json").read_bytes()


def test_training_manifests_reproducible(pipeline, tmp_path):
    _copy_run(pipeline, tmp_path, "data")
    assert run("train-ae", "--config", TINY, "--out", tmp_path, "--workers", 8) == 0
    assert run("train-dyn", "--config", TINY, "--out", tmp_path, "--workers", 8) == 0
    for stage in ("ae", "dyn"):
        assert (tmp_path / stage / "manifest.json").read_bytes() == (pipeline / stage / "manifest.json").read_bytes()


def test_particles_override(pipeline, tmp_path):
    _copy_run(pipeline, tmp_path, "data", "ae", "dyn")
    assert run("filter", "--mode", "latent", "--particles", 7, "--config", TINY, "--out", tmp_path) == 0
    assert read_tensor(tmp_path / "filter-latent" / "ensembles.ltsf").shape[1] == 7
    assert manifest(tmp_path / "filter-latent")["n_particles"] == 7


def test_latent_dim_mismatch_is_config_error(pipeline, tmp_path):
    raw = json.loads(TINY.read_text())
    raw["stepper"]["arch"]["latent_dim"] = 2
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps(raw))
    _copy_run(pipeline, tmp_path, "data", "ae")
    assert run("train-dyn", "--config", cfg_path, "--out", tmp_path) == cli.EXIT_CONFIG


def test_exit_codes(pipeline, tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("simulate", "--config", bad, "--out", tmp_path) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"model": {"kind": "waves"}}))
    assert run("simulate", "--config", bad, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("simulate", "--config", tmp_path / "missing.json", "--out", tmp_path) == cli.EXIT_IO
    assert run("train-ae", "--config", TINY, "--out", tmp_path / "empty") == cli.EXIT_IO
    assert run("filter", "--config", TINY, "--out", pipeline, "--workers", 0) == cli.EXIT_CONFIG

    def diverge(*a, **k):
        raise TrainingDivergenceError("nan")

    monkeypatch.setattr(cli, "train_autoencoder", diverge)
    _copy_run(pipeline, tmp_path, "data")
    assert run("train-ae", "--config", TINY, "--out", tmp_path) == cli.EXIT_DIVERGED


def test_degenerate_ensemble_exit_code(pipeline, tmp_path):
    _copy_run(pipeline, tmp_path, "data")
    obs = read_tensor(tmp_path / "data" / "test_obs.ltsf")
    from dlspf.storage import write_tensor

    write_tensor(tmp_path / "data" / "test_obs.ltsf", obs * np.inf)
    assert run("filter", "--mode", "hf", "--config", TINY, "--out", tmp_path) == cli.EXIT_DEGENERATE


def test_lgssm_filter_matches_kalman(tmp_path):
    cfg = CONFIGS / "lgssm.json"
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 0
    assert run("filter", "--config", cfg, "--out", tmp_path) == 0
    assert run("evaluate", "--config", cfg, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "eval" / "report-hf.json").read_text())
    assert rep["extra"]["kalman_mean_relative_error"] < 0.05
    assert run("filter", "--mode", "latent", "--config", cfg, "--out", tmp_path) == cli.EXIT_CONFIG


# ------------------------------------------------------------------ config
def test_config_hash_ignores_formatting(tmp_path):
    raw = json.loads(TINY.read_text())
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw, indent=7, sort_keys=False))
    assert load_config(p).hash == load_config(TINY).hash
    raw["filter"]["n_particles"] = 21
    assert parse_config(raw).hash != load_config(TINY).hash


def test_config_validation():
    with pytest.raises(ConfigurationError):
        parse_config({"model": {"kind": "burgers", "extra": 1}})
    with pytest.raises(ConfigurationError):
        parse_config({"filter": {"bogus": 1}})
    with pytest.raises(ConfigurationError):
        parse_config({"filter": {"test_index": 20}})
    with pytest.raises(ConfigurationError):
        parse_config({"model": {"kind": "lgssm", "lgssm": {"r": 0.25}}, "filter": {"obs_noise_std": 0.1}})
    cfg = parse_config({"seed": 3})
    assert cfg.filter.seed == 3 and cfg.ae_train.seed == 3
    assert cfg.filter.param_jitter_std == pytest.approx(0.01)
