"""Five-stage command line: simulate -> train-ae -> train-dyn -> filter -> evaluate.

Every stage reads and writes inside one run directory (``--out``)::

    data/     train/test trajectories, parameters, observations
    ae/       autoencoder.ckpt, loss.csv
    dyn/      latents.ltsf, stepper.ckpt, loss.csv
    filter-hf/, filter-latent/   ensembles, weights, summaries
    eval/     report JSON and per-step CSVs

Each stage writes a ``manifest.json`` that depends only on the config and
seed (output hashes, counts, diagnostics). Wall-clock times and the worker
count go to a separate ``timings.json`` so manifests are reproducible.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .assimilation import ObservationOperator, observe
from .autodiff.rng import rng_stream
from .config import ExperimentConfig, load_config
from .filter import (
    DegenerateEnsembleError,
    FilterConfig,
    FilterResult,
    burgers_problem,
    lgssm_problem,
    run_dlspf,
    run_hf_filter,
)
from .metrics import amrmse, metric_report, rmse, rrmse, wasserstein1_1d, weighted_mean
from .models import BlowUpError, burgers_initial_state, generate_dataset, kalman_filter
from .stepper import train_stepper
from .storage import (
    FormatError,
    ModelBundle,
    PhysicalAutoencoder,
    atomic_write,
    autoencoder_checkpoint,
    autoencoder_from_checkpoint,
    canonical_json,
    file_sha256,
    load_checkpoint,
    read_tensor,
    save_checkpoint,
    stepper_checkpoint,
    write_tensor,
)
from .wae import ConfigurationError, TrainingDivergenceError, train_autoencoder

log = logging.getLogger("dlspf")

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5
AE_LOSS_COLUMNS = ("epoch", "recon", "mmd", "consistency", "reg", "total")


# ------------------------------------------------------------------ helpers
def _write_json(path: Path, obj: dict) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_csv(path: Path, header: tuple[str, ...], rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def _manifest(cfg: ExperimentConfig, command: str, directory: Path, files: list[str], **extra) -> dict:
    man = {
        "command": command,
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "files": {name: file_sha256(directory / name) for name in files},
        **extra,
    }
    _write_json(directory / "manifest.json", man)
    return man


def sensor_operator(cfg: ExperimentConfig) -> ObservationOperator:
    return ObservationOperator(tuple(int(i) for i in cfg.burgers.sensor_indices()), cfg.burgers.nx)


def obs_steps(cfg: ExperimentConfig) -> np.ndarray:
    stride = cfg.filter.obs_stride
    return np.arange(stride, cfg.n_steps + 1, stride)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("DLSPF_WORKERS", "1"))
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    return workers


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}; run the earlier pipeline stage first")
    return path


# ----------------------------------------------------------------- simulate
def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    """Write train/test data and noisy observations for every test case."""
    d = out / "data"
    if cfg.kind == "lgssm":
        ssm = cfg.build_ssm()
        truth, ys = ssm.simulate(cfg.n_steps, cfg.seed)
        means, covs = kalman_filter(ssm, ys)
        for name, arr in (("truth", truth), ("observations", ys), ("kalman_mean", means), ("kalman_cov", covs)):
            write_tensor(d / f"{name}.ltsf", arr)
        files = ["truth.ltsf", "observations.ltsf", "kalman_mean.ltsf", "kalman_cov.ltsf"]
        return _manifest(cfg, "simulate", d, files, kind="lgssm", n_steps=cfg.n_steps)

    bc = cfg.burgers
    train = generate_dataset(bc, cfg.n_train, cfg.seed, "train")
    test = generate_dataset(bc, cfg.n_test, cfg.seed, "test")
    h = sensor_operator(cfg)
    steps = obs_steps(cfg)
    obs = np.stack([
        observe(test.trajectories[i][steps], h)
        + cfg.filter.obs_noise_std * rng_stream(cfg.seed, ("observations", i)).standard_normal((len(steps), h.num_obs))
        for i in range(cfg.n_test)
    ])
    arrays = {
        "train.ltsf": train.trajectories, "train_params.ltsf": train.amplitudes[:, None],
        "test.ltsf": test.trajectories, "test_params.ltsf": test.amplitudes[:, None],
        "test_obs.ltsf": obs, "obs_steps.ltsf": steps.astype(np.float64),
    }
    for name, arr in arrays.items():
        write_tensor(d / name, arr)
    return _manifest(cfg, "simulate", d, sorted(arrays), kind="burgers", n_train=cfg.n_train, n_test=cfg.n_test)


# ----------------------------------------------------------------- train-ae
def cmd_train_ae(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.kind != "burgers":
        raise ConfigurationError("train-ae needs a Burgers config")
    traj = read_tensor(_need(out / "data" / "train.ltsf"))
    amps = read_tensor(out / "data" / "train_params.ltsf")
    snaps = traj.reshape(-1, traj.shape[-1])
    params = np.repeat(amps, traj.shape[1], axis=0) if cfg.ae.param_dim else None
    t0 = time.perf_counter()
    res = train_autoencoder(snaps, cfg.ae, cfg.ae_train, params)
    elapsed = time.perf_counter() - t0
    d = out / "ae"
    save_checkpoint(d / "autoencoder.ckpt", autoencoder_checkpoint(res.model, res.stats))
    _write_csv(d / "loss.csv", AE_LOSS_COLUMNS, [[h["iteration"]] + [repr(h[k]) for k in AE_LOSS_COLUMNS[1:]] for h in res.history])

    test = read_tensor(_need(out / "data" / "test.ltsf"))
    tparams = read_tensor(out / "data" / "test_params.ltsf")
    q = test.reshape(-1, test.shape[-1])
    m = np.repeat(tparams, test.shape[1], axis=0)
    err = rrmse(PhysicalAutoencoder(res.model, res.stats).reconstruct(q, m), q)
    _write_json(d / "timings.json", {"train_seconds": elapsed})
    return _manifest(
        cfg, "train-ae", d, ["autoencoder.ckpt", "loss.csv"],
        heldout_relative_error=err, initial_loss=res.history[0]["total"], final_loss=res.history[-1]["total"],
    )


# ---------------------------------------------------------------- train-dyn
def cmd_train_dyn(cfg: ExperimentConfig, out: Path) -> dict:
    ae, stats = autoencoder_from_checkpoint(load_checkpoint(_need(out / "ae" / "autoencoder.ckpt")))
    if ae.latent_dim != cfg.stepper.latent_dim:
        raise ConfigurationError(f"autoencoder latent_dim {ae.latent_dim} != stepper latent_dim {cfg.stepper.latent_dim}")
    traj = read_tensor(_need(out / "data" / "train.ltsf"))
    amps = read_tensor(out / "data" / "train_params.ltsf")
    d = out / "dyn"
    latents = PhysicalAutoencoder(ae, stats).encode_batched(traj)
    write_tensor(d / "latents.ltsf", latents)
    params = stats.normalize_params(amps) if cfg.stepper.param_dim else None
    t0 = time.perf_counter()
    res = train_stepper(latents, cfg.stepper, cfg.stepper_train, params)
    elapsed = time.perf_counter() - t0
    save_checkpoint(d / "stepper.ckpt", stepper_checkpoint(res.model))
    _write_csv(d / "loss.csv", ("epoch", "loss"), [[h["iteration"], repr(h["loss"])] for h in res.history])

    bundle = ModelBundle(ae, res.model, stats)
    test = read_tensor(_need(out / "data" / "test.ltsf"))
    tparams = read_tensor(out / "data" / "test_params.ltsf")
    err = rollout_error(bundle, test, tparams)
    err1 = one_step_error(bundle, test, tparams)
    _write_json(d / "timings.json", {"train_seconds": elapsed})
    return _manifest(
        cfg, "train-dyn", d, ["latents.ltsf", "stepper.ckpt", "loss.csv"],
        latent_shape=list(latents.shape), rollout_relative_error=err, one_step_relative_error=err1,
        initial_loss=res.history[0]["loss"], final_loss=res.history[-1]["loss"],
    )


def rollout_error(bundle: ModelBundle, test: np.ndarray, params: np.ndarray) -> float:
    """Relative L2 error of decoded rollouts from each test initial state, over all strided steps."""
    stride = bundle.time_stride
    n_latent = (test.shape[1] - 1) // stride
    pred = bundle.rollout(test[:, 0], params, n_latent)
    truth = test[:, : n_latent * stride + 1 : stride]
    return rrmse(pred, truth)


def one_step_error(bundle: ModelBundle, test: np.ndarray, params: np.ndarray) -> float:
    """Relative error of single latent steps from encoded held-out histories (repeat-padded at the start)."""
    z = bundle.encode_batched(test)[:, :: bundle.time_stride]
    n, t, _ = z.shape
    k = bundle.window
    idx = np.clip(np.arange(1, t)[:, None] + np.arange(-k, 0)[None, :], 0, None)
    hist = z[:, idx].reshape(n * (t - 1), k, -1)
    m = None if bundle.stepper.cfg.param_dim == 0 else np.repeat(params, t - 1, axis=0)
    pred = bundle.step(hist, m)
    return rrmse(pred, z[:, 1:].reshape(n * (t - 1), -1))


def load_bundle(out: Path) -> ModelBundle:
    return ModelBundle.load(_need(out / "ae" / "autoencoder.ckpt"), _need(out / "dyn" / "stepper.ckpt"))


# ------------------------------------------------------------------- filter
def _initial_ensemble(cfg: ExperimentConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    rng = rng_stream(cfg.filter.seed, ("filter-prior", cfg.test_index))
    if cfg.kind == "lgssm":
        return cfg.build_ssm().sample_initial(rng, n), np.zeros((n, 0))
    lo, hi = cfg.param_prior or (cfg.burgers.q_lo, cfg.burgers.q_hi)
    amps = rng.uniform(lo, hi, n)
    return burgers_initial_state(cfg.burgers, amps), amps[:, None]


def run_filter(cfg: ExperimentConfig, out: Path, mode: str, n_particles: int | None = None, workers: int = 1) -> FilterResult:
    """Run one filter on the configured test case (no files written)."""
    fcfg = cfg.filter if n_particles is None else FilterConfig.from_dict({**cfg.filter.to_dict(), "n_particles": n_particles})
    q0, m0 = _initial_ensemble(cfg, fcfg.n_particles)
    if cfg.kind == "lgssm":
        if mode != "hf":
            raise ConfigurationError("the linear-Gaussian model only supports mode=hf")
        ys = read_tensor(_need(out / "data" / "observations.ltsf"))
        ys = ys[fcfg.obs_stride - 1 :: fcfg.obs_stride]
        return run_hf_filter(lgssm_problem(cfg.build_ssm()), q0, ys, cfg.n_steps, fcfg, m0, workers)
    obs = read_tensor(_need(out / "data" / "test_obs.ltsf"))[cfg.test_index]
    h = sensor_operator(cfg)
    if mode == "hf":
        return run_hf_filter(burgers_problem(cfg.burgers, h, cfg.process_noise_std), q0, obs, cfg.n_steps, fcfg, m0, workers)
    if mode == "latent":
        return run_dlspf(load_bundle(out), q0, obs, cfg.n_steps, fcfg, lambda q: observe(q, h), m0, workers)
    raise ConfigurationError(f"unknown filter mode {mode!r}")


def cmd_filter(cfg: ExperimentConfig, out: Path, mode: str, n_particles: int | None = None, workers: int = 1) -> dict:
    t0 = time.perf_counter()
    res = run_filter(cfg, out, mode, n_particles, workers)
    elapsed = time.perf_counter() - t0
    d = out / f"filter-{mode}"
    pct = res.percentiles((2.5, 50.0, 97.5))
    arrays = {
        "steps.ltsf": res.steps.astype(np.float64), "ensembles.ltsf": res.ensembles, "weights.ltsf": res.weights,
        "params.ltsf": res.params, "mean.ltsf": res.mean, "std.ltsf": res.std, "percentiles.ltsf": pct,
    }
    if res.latents is not None:
        arrays["latents.ltsf"] = res.latents
    for name, arr in arrays.items():
        write_tensor(d / name, arr)
    _write_json(d / "timings.json", {"total_seconds": elapsed, "phases": res.timings, "workers": workers})
    return _manifest(
        cfg, "filter", d, sorted(arrays), mode=mode, n_particles=int(res.ensembles.shape[1]),
        ess=res.ess.tolist(), ess_post=res.ess_post.tolist(),
        resample_steps=res.steps[1:][res.resampled].tolist(),
    )


# ----------------------------------------------------------------- evaluate
def _load_run(d: Path) -> dict[str, np.ndarray]:
    return {name: read_tensor(d / f"{name}.ltsf") for name in ("steps", "ensembles", "weights", "params", "mean")}


def compare_runs(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, float]:
    """Distances between two filter runs on the same steps: mean RMSE, AMRMSE, W1 of the final parameters."""
    out = {
        "mean_rmse": rmse(a["mean"], b["mean"]),
        "amrmse": amrmse(a["ensembles"], b["ensembles"], a["weights"], b["weights"]),
    }
    if a["params"].shape[-1]:
        out["param_wasserstein1"] = wasserstein1_1d(
            a["params"][-1, :, 0], b["params"][-1, :, 0], a["weights"][-1], b["weights"][-1]
        )
    return out


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> dict:
    runs = {m: _load_run(out / f"filter-{m}") for m in ("hf", "latent") if (out / f"filter-{m}" / "mean.ltsf").exists()}
    if not runs:
        raise FileNotFoundError("no filter runs found; run `dlspf filter` first")
    d = out / "eval"
    summary: dict = {}
    files = []
    for mode, run in runs.items():
        steps = run["steps"].astype(int)
        if cfg.kind == "lgssm":
            truth = read_tensor(_need(out / "data" / "truth.ltsf"))[steps]
        else:
            truth = read_tensor(_need(out / "data" / "test.ltsf"))[cfg.test_index][steps]
        ref = runs.get("hf") if mode == "latent" else None
        window = min(cfg.metrics_window, len(steps))
        report = metric_report(
            run["ensembles"], truth, run["weights"],
            reference=None if ref is None else ref["ensembles"],
            reference_weights=None if ref is None else ref["weights"],
            window=window,
        )
        if run["params"].shape[-1] and cfg.kind == "burgers":
            q_true = float(read_tensor(out / "data" / "test_params.ltsf")[cfg.test_index, 0])
            q_est = float(weighted_mean(run["params"][-1:], run["weights"][-1:])[0, 0])
            report.extra.update({"param_truth": q_true, "param_mean": q_est, "param_relative_error": abs(q_est - q_true) / abs(q_true)})
        if cfg.kind == "lgssm":
            km = read_tensor(_need(out / "data" / "kalman_mean.ltsf"))
            report.extra["kalman_mean_relative_error"] = rrmse(run["mean"][1:], km[steps[1:] - 1])
        if ref is not None:
            report.extra["vs_hf"] = compare_runs(run, ref)
            report.extra["rmse_ratio_vs_hf"] = report.rmse / rmse(ref["mean"], truth)
            if report.wasserstein1 is None and "param_wasserstein1" in report.extra["vs_hf"]:
                report.wasserstein1 = report.extra["vs_hf"]["param_wasserstein1"]
        atomic_write(d / f"report-{mode}.json", (report.to_json() + "\n").encode())
        per_step = np.sqrt(np.mean((run["mean"] - truth) ** 2, axis=-1))
        _write_csv(d / f"steps-{mode}.csv", ("step", "rmse"), [[int(s), repr(float(e))] for s, e in zip(steps, per_step)])
        files += [f"report-{mode}.json", f"steps-{mode}.csv"]
        summary[mode] = report.to_dict()
    return _manifest(cfg, "evaluate", d, files, modes=sorted(runs))


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlspf", description="Deep latent space particle filter pipeline")
    p.add_argument("command", choices=["simulate", "train-ae", "train-dyn", "filter", "evaluate"])
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--particles", type=int, default=None, help="override the particle count")
    p.add_argument("--mode", choices=["hf", "latent"], default="hf", help="filter in physical or latent space")
    p.add_argument("--out", default="run", help="run directory")
    p.add_argument("--workers", type=int, default=None, help="worker threads (default: $DLSPF_WORKERS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed)
        workers = resolve_workers(args.workers)
        if args.command == "simulate":
            man = cmd_simulate(cfg, out)
        elif args.command == "train-ae":
            man = cmd_train_ae(cfg, out)
        elif args.command == "train-dyn":
            man = cmd_train_dyn(cfg, out)
        elif args.command == "filter":
            man = cmd_filter(cfg, out, args.mode, args.particles, workers)
        else:
            man = cmd_evaluate(cfg, out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateEnsembleError as exc:
        print(f"degenerate ensemble: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (TrainingDivergenceError, BlowUpError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(canonical_json({k: v for k, v in man.items() if k != "files"}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
