"""Bootstrap particle filtering in physical space and in latent space.

Both filters share one loop (:func:`filter_step`): propagate every particle
with process noise, and at observation times jitter the static parameters,
map particles to physical states, weight them by the Gaussian observation
likelihood and resample multinomially when the effective sample size drops
below the threshold. The latent filter only differs in what "propagate" and
"map to physical" mean: a transformer step on a window of latent states and
a decoder pass.

Determinism: every random draw of step ``n`` comes from its own stream
(``("process", n)``, ``("jitter", n)``, ``("resample", n)``) and is drawn as
one block for the whole ensemble. Particles are processed in chunks of a
fixed size whatever the worker count, so results do not depend on it.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .assimilation import ObservationOperator, gaussian_log_likelihood, observe
from .autodiff.rng import rng_stream
from .models import BurgersConfig, LinearGaussianSSM, burgers_forward


class DegenerateEnsembleError(FloatingPointError):
    """All particle weights vanished (or became non-finite)."""


PHASES = ("step", "decode", "weight", "resample")


# ------------------------------------------------------------------ ensemble
@dataclass
class ParticleEnsemble:
    """Weighted particles: filter states ``(N, ...)``, parameters ``(N, n_m)``, weights ``(N,)``."""

    particles: np.ndarray
    params: np.ndarray
    weights: np.ndarray
    step: int = 0

    def __post_init__(self) -> None:
        n = len(self.particles)
        self.params = np.asarray(self.params, dtype=np.float64).reshape(n, -1)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (n,):
            raise ValueError(f"expected {n} weights, got shape {self.weights.shape}")
        _check_normalized(self.weights)

    @classmethod
    def uniform(cls, particles: np.ndarray, params: np.ndarray | None = None) -> ParticleEnsemble:
        n = len(particles)
        params = np.zeros((n, 0)) if params is None else params
        return cls(np.asarray(particles), params, np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return len(self.particles)


def _check_normalized(w: np.ndarray) -> None:
    if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be a probability vector")


@dataclass(frozen=True)
class FilterConfig:
    """Filter settings.

    Attributes:
        resample_threshold: ``lambda_ESS``; ``None`` means ``N / 2``.
        obs_stride: Physical time steps between observations.
        param_jitter_std: Std of the artificial parameter noise per observation.
        chunk_size: Particles per work item (fixed, so worker count cannot
            change results).
    """

    n_particles: int = 100
    resample_threshold: float | None = None
    obs_stride: int = 10
    obs_noise_std: float = 0.1
    param_jitter_std: float = 0.0
    seed: int = 0
    chunk_size: int = 64

    def __post_init__(self) -> None:
        if self.n_particles < 1 or self.obs_stride < 1 or self.chunk_size < 1:
            raise ValueError("n_particles, obs_stride and chunk_size must be >= 1")
        if not 1 <= self.threshold <= self.n_particles:
            raise ValueError("resample threshold must lie in [1, N]")
        if self.obs_noise_std <= 0 or self.param_jitter_std < 0:
            raise ValueError("noise levels must be positive (observation) or non-negative")

    @property
    def threshold(self) -> float:
        if self.resample_threshold is None:
            return max(1.0, self.n_particles / 2)
        return self.resample_threshold

    @classmethod
    def from_dict(cls, d: dict) -> FilterConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ------------------------------------------------------------ weight algebra
def update_weights(prev_weights: np.ndarray, log_likelihoods: np.ndarray) -> np.ndarray:
    """``w_i ∝ prev_i * exp(ll_i)``, normalized in log space.

    Raises:
        DegenerateEnsembleError: If every updated weight is zero or non-finite.
    """
    prev = np.asarray(prev_weights, dtype=np.float64)
    ll = np.asarray(log_likelihoods, dtype=np.float64)
    if prev.shape != ll.shape:
        raise ValueError("weights and log-likelihoods differ in length")
    with np.errstate(divide="ignore"):
        logw = np.log(prev) + ll
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateEnsembleError("all particle weights are zero after the likelihood update")
    w = np.exp(logw - top)
    return w / w.sum()


def effective_sample_size(weights: np.ndarray) -> float:
    """``1 / sum w_i^2`` of normalized weights.

    Raises:
        ValueError: If the weights are not a probability vector.
    """
    w = np.asarray(weights, dtype=np.float64)
    _check_normalized(w)
    return float(1.0 / np.sum(w * w))


def multinomial_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``N`` i.i.d. draws from the categorical distribution ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(len(w)), side="right")


def multinomial_resample(ensemble: ParticleEnsemble, rng: np.random.Generator) -> ParticleEnsemble:
    idx = multinomial_indices(ensemble.weights, rng)
    n = ensemble.size
    return ParticleEnsemble(ensemble.particles[idx], ensemble.params[idx], np.full(n, 1.0 / n), ensemble.step)


# ------------------------------------------------------------------ problems
@dataclass
class FilterProblem:
    """What the shared loop needs to know about a model.

    Attributes:
        advance: ``(states, params, eps) -> states``; ``eps`` is a standard
            normal block of shape ``(n, noise_dim)`` to be scaled and added.
        noise_dim: Width of the noise block.
        physical: ``(states, params) -> (n, state_dim)`` physical states.
        observe: Physical states to noise-free observations ``(n, N_o)``.
    """

    advance: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    noise_dim: int
    physical: Callable[[np.ndarray, np.ndarray], np.ndarray]
    observe: Callable[[np.ndarray], np.ndarray]


def burgers_problem(cfg: BurgersConfig, h: ObservationOperator, process_noise_std: float) -> FilterProblem:
    """One RK4 step per filter step; no model error on the Dirichlet nodes."""
    std = np.full(cfg.nx, process_noise_std)
    std[[0, -1]] = 0.0

    def advance(q: np.ndarray, m: np.ndarray, eps: np.ndarray) -> np.ndarray:
        return burgers_forward(q, cfg) + eps * std

    return FilterProblem(advance, cfg.nx, lambda q, m: q, lambda q: observe(q, h))


def lgssm_problem(ssm: LinearGaussianSSM) -> FilterProblem:
    sqrt_q = ssm._sqrt("Q")

    def advance(x: np.ndarray, m: np.ndarray, eps: np.ndarray) -> np.ndarray:
        return ssm.forward(x) + eps @ sqrt_q.T

    return FilterProblem(advance, ssm.state_dim, lambda x, m: x, ssm.observe)


class Surrogate(Protocol):
    """Latent model used by :func:`run_dlspf` (see ``storage.ModelBundle``)."""

    latent_dim: int
    window: int
    time_stride: int
    latent_noise_std: float

    def encode(self, q: np.ndarray, m: np.ndarray) -> np.ndarray: ...

    def decode(self, z: np.ndarray, m: np.ndarray) -> np.ndarray: ...

    def step(self, history: np.ndarray, m: np.ndarray) -> np.ndarray: ...


@dataclass
class IdentitySurrogate:
    """Encoder, decoder and stepper are identity maps; reduces D-LSPF to the HF filter
    whose forward model is the identity."""

    latent_dim: int
    window: int = 1
    time_stride: int = 1
    latent_noise_std: float = 0.0

    def encode(self, q: np.ndarray, m: np.ndarray) -> np.ndarray:
        return np.asarray(q, dtype=np.float64)

    def decode(self, z: np.ndarray, m: np.ndarray) -> np.ndarray:
        return z

    def step(self, history: np.ndarray, m: np.ndarray) -> np.ndarray:
        return history[:, -1]


def latent_problem(surrogate: Surrogate, observe_fn: Callable[[np.ndarray], np.ndarray]) -> FilterProblem:
    """Particles are windows ``(n, k + 1, latent_dim)`` of latent states."""
    std = surrogate.latent_noise_std

    def advance(hist: np.ndarray, m: np.ndarray, eps: np.ndarray) -> np.ndarray:
        z = surrogate.step(hist, m) + eps * std
        return np.concatenate([hist[:, 1:], z[:, None, :]], axis=1)

    return FilterProblem(advance, surrogate.latent_dim, lambda hist, m: surrogate.decode(hist[:, -1], m), observe_fn)


# --------------------------------------------------------------------- loop
@dataclass
class StepInfo:
    """Diagnostics of one step; at observation steps ``weighted`` is the ensemble
    after the likelihood update but before resampling, ``physical`` its states."""

    ess: float = math.nan
    resampled: bool = False
    weighted: ParticleEnsemble | None = None
    physical: np.ndarray | None = None


def _chunked(fn: Callable[..., np.ndarray], arrays: Sequence[np.ndarray], chunk: int, workers: int) -> np.ndarray:
    n = len(arrays[0])
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    work = [tuple(a[lo:hi] for a in arrays) for lo, hi in bounds]
    if workers > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda args: fn(*args), work))
    else:
        parts = [fn(*args) for args in work]
    return np.concatenate(parts, axis=0)


def filter_step(
    ensemble: ParticleEnsemble,
    problem: FilterProblem,
    cfg: FilterConfig,
    observation: np.ndarray | None = None,
    workers: int = 1,
    timings: dict[str, float] | None = None,
) -> tuple[ParticleEnsemble, StepInfo]:
    """Propagate one step and, if an observation is given, weight and maybe resample."""
    timings = {} if timings is None else timings
    n = ensemble.step + 1
    size = ensemble.size
    t0 = time.perf_counter()
    eps = rng_stream(cfg.seed, ("process", n)).standard_normal((size, problem.noise_dim))
    states = _chunked(problem.advance, (ensemble.particles, ensemble.params, eps), cfg.chunk_size, workers)
    params = ensemble.params
    t1 = time.perf_counter()
    timings["step"] = timings.get("step", 0.0) + t1 - t0
    if observation is None:
        return ParticleEnsemble(states, params, ensemble.weights, n), StepInfo()

    if cfg.param_jitter_std > 0 and params.shape[1]:
        params = params + cfg.param_jitter_std * rng_stream(cfg.seed, ("jitter", n)).standard_normal(params.shape)
    phys = _chunked(problem.physical, (states, params), cfg.chunk_size, workers)
    t2 = time.perf_counter()
    ll = gaussian_log_likelihood(np.asarray(observation) - problem.observe(phys), cfg.obs_noise_std)
    w = update_weights(ensemble.weights, ll)
    ess = effective_sample_size(w)
    t3 = time.perf_counter()
    out = ParticleEnsemble(states, params, w, n)
    info = StepInfo(ess, False, out, phys)
    if ess < cfg.threshold:
        out = multinomial_resample(out, rng_stream(cfg.seed, ("resample", n)))
        info.resampled = True
    t4 = time.perf_counter()
    timings["decode"] = timings.get("decode", 0.0) + t2 - t1
    timings["weight"] = timings.get("weight", 0.0) + t3 - t2
    timings["resample"] = timings.get("resample", 0.0) + t4 - t3
    return out, info


def hf_filter_step(
    ensemble: ParticleEnsemble,
    observation: np.ndarray | None,
    problem: FilterProblem,
    cfg: FilterConfig,
    workers: int = 1,
) -> ParticleEnsemble:
    return filter_step(ensemble, problem, cfg, observation, workers)[0]


@dataclass
class FilterResult:
    """Physical ensembles at the initial time and after every observation.

    ``steps`` are physical time-step indices. ``ess`` is taken right after the
    likelihood update; ``ess_post`` after the (conditional) resampling.
    """

    steps: np.ndarray  # (R,)
    ensembles: np.ndarray  # (R, N, state_dim), pre-resampling
    weights: np.ndarray  # (R, N)
    params: np.ndarray  # (R, N, n_m)
    ess: np.ndarray  # (R - 1,)
    ess_post: np.ndarray  # (R - 1,)
    resampled: np.ndarray  # (R - 1,) bool
    latents: np.ndarray | None = None  # (R, N, latent_dim) for the latent filter
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return np.einsum("rn,rnd->rd", self.weights, self.ensembles)

    @property
    def std(self) -> np.ndarray:
        dev = self.ensembles - self.mean[:, None, :]
        return np.sqrt(np.einsum("rn,rnd->rd", self.weights, dev * dev))

    @property
    def param_mean(self) -> np.ndarray:
        return np.einsum("rn,rnd->rd", self.weights, self.params)

    def percentiles(self, q: Sequence[float] = (2.5, 50.0, 97.5)) -> np.ndarray:
        """Weighted percentiles ``(len(q), R, state_dim)`` (inverse of the weighted CDF)."""
        from .metrics import weighted_quantile

        return np.stack([weighted_quantile(self.ensembles, self.weights, p / 100.0) for p in q])


def _run(
    ensemble: ParticleEnsemble,
    problem: FilterProblem,
    observations: np.ndarray,
    n_steps: int,
    obs_every: int,
    cfg: FilterConfig,
    workers: int,
    time_stride: int,
    latent_view: Callable[[np.ndarray], np.ndarray] | None = None,
) -> FilterResult:
    observations = np.asarray(observations, dtype=np.float64)
    n_obs = n_steps // obs_every
    if len(observations) < n_obs:
        raise ValueError(f"{n_steps} steps with stride {obs_every} need {n_obs} observations, got {len(observations)}")
    timings = {p: 0.0 for p in PHASES}
    t = time.perf_counter()
    phys0 = _chunked(problem.physical, (ensemble.particles, ensemble.params), cfg.chunk_size, workers)
    timings["decode"] += time.perf_counter() - t
    steps, ens, wts, prm = [0], [phys0], [ensemble.weights], [ensemble.params]
    lat = [latent_view(ensemble.particles)] if latent_view else None
    ess, ess_post, resampled = [], [], []
    for n in range(1, n_steps + 1):
        obs = observations[n // obs_every - 1] if n % obs_every == 0 else None
        ensemble, info = filter_step(ensemble, problem, cfg, obs, workers, timings)
        if obs is None:
            continue
        pre = info.weighted
        steps.append(n * time_stride)
        ens.append(info.physical)
        wts.append(pre.weights)
        prm.append(pre.params)
        if lat is not None:
            lat.append(latent_view(pre.particles))
        ess.append(info.ess)
        ess_post.append(effective_sample_size(ensemble.weights))
        resampled.append(info.resampled)
    return FilterResult(
        np.asarray(steps), np.stack(ens), np.stack(wts), np.stack(prm), np.asarray(ess),
        np.asarray(ess_post), np.asarray(resampled, dtype=bool), None if lat is None else np.stack(lat), timings,
    )


def run_hf_filter(
    problem: FilterProblem,
    initial_states: np.ndarray,
    observations: np.ndarray,
    n_steps: int,
    cfg: FilterConfig,
    initial_params: np.ndarray | None = None,
    workers: int = 1,
) -> FilterResult:
    """Bootstrap filter on the high-fidelity model, one filter step per model step.

    Observation ``j`` (0-based) is assimilated after step ``(j + 1) * obs_stride``.
    """
    ens = ParticleEnsemble.uniform(np.asarray(initial_states, dtype=np.float64), initial_params)
    return _run(ens, problem, observations, n_steps, cfg.obs_stride, cfg, workers, 1)


def run_dlspf(
    surrogate: Surrogate,
    initial_states: np.ndarray,
    observations: np.ndarray,
    n_steps: int,
    cfg: FilterConfig,
    observe_fn: Callable[[np.ndarray], np.ndarray],
    initial_params: np.ndarray | None = None,
    workers: int = 1,
) -> FilterResult:
    """Deep latent space particle filter.

    Encodes the ``N`` initial conditions, then loops: latent step plus model
    error, decode, weight, normalize, resample if ``ESS < lambda_ESS``.
    ``n_steps`` and ``cfg.obs_stride`` count physical time steps; each latent
    step covers ``surrogate.time_stride`` of them. Decoding only happens at
    observation times, where the likelihood needs it.

    Raises:
        ValueError: If the observation stride is not a multiple of the time stride.
    """
    stride = surrogate.time_stride
    if cfg.obs_stride % stride or n_steps % stride:
        raise ValueError(f"obs stride {cfg.obs_stride} and n_steps {n_steps} must be multiples of time stride {stride}")
    q0 = np.asarray(initial_states, dtype=np.float64)
    m0 = np.zeros((len(q0), 0)) if initial_params is None else np.asarray(initial_params, dtype=np.float64).reshape(len(q0), -1)
    z0 = surrogate.encode(q0, m0)
    hist = np.repeat(z0[:, None, :], surrogate.window, axis=1)
    ens = ParticleEnsemble.uniform(hist, m0)
    problem = latent_problem(surrogate, observe_fn)
    return _run(
        ens, problem, observations, n_steps // stride, cfg.obs_stride // stride, cfg, workers, stride,
        latent_view=lambda h: h[:, -1],
    )


# ------------------------------------------------------------- diagnostics
@dataclass
class ConvergenceResult:
    slope: float
    intercept: float
    counts: np.ndarray
    errors: np.ndarray  # root-mean-square error over seeds per count


def mc_convergence_test(
    estimator: Callable[[int, int], float],
    particle_counts: Sequence[int] = (100, 1000, 10000),
    seeds: Sequence[int] = tuple(range(20)),
) -> ConvergenceResult:
    """Least-squares slope of ``log error`` against ``log N``.

    ``estimator(N, seed)`` returns the error of one run; runs are combined
    per ``N`` as a root mean square over seeds.
    """
    counts = np.asarray(particle_counts, dtype=np.float64)
    errors = np.array([math.sqrt(np.mean([estimator(int(n), s) ** 2 for s in seeds])) for n in counts])
    slope, intercept = np.polyfit(np.log(counts), np.log(errors), 1)
    return ConvergenceResult(float(slope), float(intercept), counts, errors)


@dataclass
class ImportanceRatioDiagnostic:
    ratio: float
    sup: float  # max of the likelihood over the samples
    mean: float  # Monte Carlo estimate of the prior expectation of the likelihood
    n_samples: int


def estimate_importance_ratio(
    log_likelihood: Callable[[np.ndarray], np.ndarray],
    prior_sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_samples: int,
    seed: int = 0,
) -> ImportanceRatioDiagnostic:
    """``sup h / E_f[h]`` estimated from ``n_samples`` prior draws.

    The likelihood is passed in log form and combined in log space.

    Raises:
        ValueError: If fewer than 100 samples are requested or the mean likelihood is zero.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples")
    u = prior_sampler(rng_stream(seed, "importance-ratio"), n_samples)
    ll = np.asarray(log_likelihood(u), dtype=np.float64)
    top = np.max(ll)
    if not np.isfinite(top):
        raise ValueError("likelihood vanishes on every prior sample")
    log_mean = top + math.log(np.mean(np.exp(ll - top)))
    return ImportanceRatioDiagnostic(math.exp(top - log_mean), math.exp(top), math.exp(log_mean), n_samples)
