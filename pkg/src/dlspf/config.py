"""Experiment configuration: one JSON document describing a whole run."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .filter import FilterConfig
from .models import BurgersConfig, LinearGaussianSSM
from .stepper import StepperConfig, StepperTrainConfig
from .storage import config_hash
from .wae import AEConfig, AETrainConfig, ConfigurationError

MODEL_KINDS = ("burgers", "lgssm")


@dataclass
class ExperimentConfig:
    """Parsed experiment description.

    Sections: ``model`` (kind plus solver settings), ``data`` (split sizes),
    ``ae`` and ``stepper`` (``arch`` and ``train`` each), ``filter`` (filter
    settings plus ``n_steps``, ``test_index`` and ``param_prior``) and
    ``metrics`` (``window``). ``raw`` keeps the document for hashing.
    """

    raw: dict
    name: str = "experiment"
    seed: int = 0
    kind: str = "burgers"
    burgers: BurgersConfig = field(default_factory=BurgersConfig)
    lgssm: dict = field(default_factory=dict)
    n_train: int = 256
    n_test: int = 20
    ae: AEConfig = field(default_factory=AEConfig)
    ae_train: AETrainConfig = field(default_factory=AETrainConfig)
    stepper: StepperConfig = field(default_factory=StepperConfig)
    stepper_train: StepperTrainConfig = field(default_factory=StepperTrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    n_steps: int = 300
    test_index: int = 0
    param_prior: tuple[float, float] | None = None
    process_noise_std: float = 0.0
    metrics_window: int = 5

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def build_ssm(self) -> LinearGaussianSSM:
        p = {"a": 0.9, "q": 0.01, "h": 1.0, "r": 0.25, "m0": 0.0, "p0": 1.0, **self.lgssm}
        return LinearGaussianSSM.scalar(**p)


def parse_config(raw: dict, seed: int | None = None) -> ExperimentConfig:
    """Validate and parse a config document; ``seed`` overrides the master seed.

    Raises:
        ConfigurationError: On unknown keys, bad values or inconsistent sections.
    """
    raw = json.loads(json.dumps(raw))
    if seed is not None:
        raw["seed"] = seed
    try:
        model = dict(raw.get("model", {}))
        kind = model.pop("kind", "burgers")
        if kind not in MODEL_KINDS:
            raise ConfigurationError(f"model.kind must be one of {MODEL_KINDS}")
        burgers = model.pop("burgers", {})
        if "sensor_positions" in burgers:
            burgers["sensor_positions"] = tuple(burgers["sensor_positions"])
        lgssm = model.pop("lgssm", {})
        if model:
            raise ConfigurationError(f"unknown model keys {sorted(model)}")
        data = raw.get("data", {})
        ae = raw.get("ae", {})
        st = raw.get("stepper", {})
        filt = dict(raw.get("filter", {}))
        extras = {k: filt.pop(k) for k in ("n_steps", "test_index", "param_prior", "process_noise_std") if k in filt}
        filt.setdefault("seed", int(raw.get("seed", 0)))
        if kind == "burgers":
            bc = BurgersConfig(**burgers)
            # static-parameter jitter: 1% of the training range per assimilation
            filt.setdefault("param_jitter_std", 0.01 * (bc.q_hi - bc.q_lo))
        prior = extras.get("param_prior")
        cfg = ExperimentConfig(
            raw=raw,
            name=str(raw.get("name", "experiment")),
            seed=int(raw.get("seed", 0)),
            kind=kind,
            burgers=BurgersConfig(**burgers),
            lgssm=lgssm,
            n_train=int(data.get("n_train", 256)),
            n_test=int(data.get("n_test", 20)),
            ae=AEConfig.from_dict(ae.get("arch", {})),
            ae_train=AETrainConfig.from_dict({"seed": int(raw.get("seed", 0)), **ae.get("train", {})}),
            stepper=StepperConfig.from_dict(st.get("arch", {})),
            stepper_train=StepperTrainConfig.from_dict({"seed": int(raw.get("seed", 0)), **st.get("train", {})}),
            filter=FilterConfig.from_dict(filt),
            n_steps=int(extras.get("n_steps", 300)),
            test_index=int(extras.get("test_index", 0)),
            param_prior=None if prior is None else (float(prior[0]), float(prior[1])),
            process_noise_std=float(extras.get("process_noise_std", 0.0)),
            metrics_window=int(raw.get("metrics", {}).get("window", 5)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc
    if cfg.n_train < 1 or cfg.n_test < 1:
        raise ConfigurationError("data.n_train and data.n_test must be >= 1")
    if not 0 <= cfg.test_index < cfg.n_test:
        raise ConfigurationError("filter.test_index out of range")
    if cfg.kind == "lgssm":
        ssm = cfg.build_ssm()
        if ssm.R.shape != (1, 1) or not np.isclose(cfg.filter.obs_noise_std**2, float(ssm.R[0, 0])):
            raise ConfigurationError("filter.obs_noise_std must equal sqrt(model.lgssm.r)")
    if cfg.kind == "burgers" and cfg.n_steps > cfg.burgers.n_steps:
        raise ConfigurationError("filter.n_steps exceeds the simulated trajectory length")
    return cfg


def load_config(path: str | os.PathLike, seed: int | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw, seed)
