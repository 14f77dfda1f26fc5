"""Evaluation metrics for point estimates and ensembles.

Ensemble series are arrays ``(..., N, d)`` with the member axis second to
last; truth and reference series are ``(..., d)``. Ensemble metrics accept
optional weights ``(..., N)`` so weighted filter ensembles can be scored
without resampling; the default is equal weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import wasserstein_distance

MIN_ENSEMBLE = 5
STD_FLOOR = 1e-6


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared error over all entries."""
    e, t = _pair(estimate, truth)
    return float(np.sqrt(np.mean((e - t) ** 2)))


def rrmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """``||estimate - truth||_2 / ||truth||_2``.

    Raises:
        ValueError: If the truth has zero norm.
    """
    e, t = _pair(estimate, truth)
    norm = np.linalg.norm(t)
    if norm == 0:
        raise ValueError("relative error undefined for a zero truth")
    return float(np.linalg.norm(e - t) / norm)


def _weights(ens: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    n = ens.shape[-2]
    if weights is None:
        return np.full(ens.shape[:-1], 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != ens.shape[:-1]:
        raise ValueError(f"weights {w.shape} do not match ensemble {ens.shape}")
    return w / w.sum(axis=-1, keepdims=True)


def _ensemble(ens: np.ndarray, minimum: int = 1) -> np.ndarray:
    ens = np.asarray(ens, dtype=np.float64)
    if ens.ndim < 2:
        raise ValueError("ensembles must be (..., N, d)")
    if ens.shape[-2] < minimum:
        raise ValueError(f"ensemble needs at least {minimum} members, got {ens.shape[-2]}")
    return ens


def weighted_mean(ens: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    ens = _ensemble(ens)
    return np.einsum("...n,...nd->...d", _weights(ens, weights), ens)


def central_moments(ens: np.ndarray, weights: np.ndarray | None = None, orders=(2, 3, 4)) -> np.ndarray:
    """Central moments ``(len(orders), ..., d)`` of each point across members."""
    ens = _ensemble(ens)
    w = _weights(ens, weights)
    dev = ens - np.einsum("...n,...nd->...d", w, ens)[..., None, :]
    return np.stack([np.einsum("...n,...nd->...d", w, dev**k) for k in orders])


def weighted_quantile(ens: np.ndarray, weights: np.ndarray | None, q: float) -> np.ndarray:
    """Smallest member value whose cumulative weight reaches ``q`` (per point)."""
    ens = _ensemble(ens)
    w = _weights(ens, weights)
    order = np.argsort(ens, axis=-2, kind="stable")
    values = np.take_along_axis(ens, order, axis=-2)
    cdf = np.cumsum(np.take_along_axis(np.broadcast_to(w[..., None], ens.shape), order, axis=-2), axis=-2)
    idx = np.minimum(np.sum(cdf < q - 1e-12, axis=-2, keepdims=True), ens.shape[-2] - 1)
    return np.take_along_axis(values, idx, axis=-2)[..., 0, :]


def amrmse(
    ens_a: np.ndarray,
    ens_b: np.ndarray,
    weights_a: np.ndarray | None = None,
    weights_b: np.ndarray | None = None,
) -> float:
    """Mean over orders 2, 3, 4 of the RMSE between the ensembles' central moments.

    Ensemble sizes may differ; the point shapes ``(..., d)`` must agree.

    Raises:
        ValueError: If an ensemble has fewer than 5 members or shapes differ.
    """
    a, b = _ensemble(ens_a, MIN_ENSEMBLE), _ensemble(ens_b, MIN_ENSEMBLE)
    if a.shape[:-2] + a.shape[-1:] != b.shape[:-2] + b.shape[-1:]:
        raise ValueError("ensembles describe different points")
    ma, mb = central_moments(a, weights_a), central_moments(b, weights_b)
    return float(np.mean([rmse(x, y) for x, y in zip(ma, mb)]))


def picp(
    ens: np.ndarray,
    truth: np.ndarray,
    lo: float = 2.5,
    hi: float = 97.5,
    weights: np.ndarray | None = None,
) -> float:
    """Fraction of points whose truth lies inside the ``[lo, hi]`` percentile band."""
    ens = _ensemble(ens)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != ens.shape[:-2] + ens.shape[-1:]:
        raise ValueError(f"truth {truth.shape} does not match ensemble {ens.shape}")
    if weights is None:
        band_lo, band_hi = np.percentile(ens, [lo, hi], axis=-2)
    else:
        band_lo, band_hi = weighted_quantile(ens, weights, lo / 100), weighted_quantile(ens, weights, hi / 100)
    return float(np.mean((truth >= band_lo) & (truth <= band_hi)))


def nll_gaussian(ens: np.ndarray, reference: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Negative log density of ``reference`` under a per-dimension Gaussian fit.

    Args:
        ens: ``(T, N, d)`` (or ``(N, d)``) ensemble series.
        reference: ``(T, d)`` (or ``(d,)``) reference points.

    Returns:
        Sum over dimensions, mean over time steps. Standard deviations are
        floored at 1e-6.
    """
    ens = _ensemble(ens, MIN_ENSEMBLE)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != ens.shape[:-2] + ens.shape[-1:]:
        raise ValueError(f"reference {ref.shape} does not match ensemble {ens.shape}")
    mu = weighted_mean(ens, weights)
    var = np.maximum(central_moments(ens, weights, orders=(2,))[0], STD_FLOOR**2)
    per_dim = 0.5 * np.log(2.0 * math.pi * var) + (ref - mu) ** 2 / (2.0 * var)
    return float(np.mean(np.sum(per_dim, axis=-1)))


def wasserstein1_1d(
    a: np.ndarray,
    b: np.ndarray,
    weights_a: np.ndarray | None = None,
    weights_b: np.ndarray | None = None,
) -> float:
    """Wasserstein-1 distance between two (optionally weighted) 1-D empirical distributions.

    Equals the mean absolute difference of the sorted samples for equal-size
    unweighted sets, and the integral of the absolute quantile-function
    difference in general.

    Raises:
        ValueError: On an empty sample set.
    """
    a, b = np.ravel(a), np.ravel(b)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    return float(wasserstein_distance(a, b, weights_a, weights_b))


def windowed_rrmse(estimate: np.ndarray, truth: np.ndarray, window: int) -> np.ndarray:
    """RRMSE over every window of ``window`` consecutive time steps (axis 0).

    Raises:
        ValueError: If ``window`` is < 1 or longer than the series.
    """
    e, t = _pair(estimate, truth)
    if window < 1 or window > len(t):
        raise ValueError(f"window must be in [1, {len(t)}]")
    return np.array([rrmse(e[i : i + window], t[i : i + window]) for i in range(len(t) - window + 1)])


# ------------------------------------------------------------------- report
METRIC_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricReport",
    "type": "object",
    "properties": {
        "rmse": {"type": "number", "minimum": 0},
        "rrmse": {"type": "number", "minimum": 0},
        "amrmse": {"type": ["number", "null"], "minimum": 0},
        "nll": {"type": ["number", "null"]},
        "picp": {"type": "number", "minimum": 0, "maximum": 1},
        "wasserstein1": {"type": ["number", "null"], "minimum": 0},
        "windowed_rrmse": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "extra": {"type": "object"},
    },
    "required": ["rmse", "rrmse", "amrmse", "nll", "picp", "wasserstein1", "windowed_rrmse"],
    "additionalProperties": False,
}


@dataclass
class MetricReport:
    rmse: float
    rrmse: float
    picp: float
    amrmse: float | None = None
    nll: float | None = None
    wasserstein1: float | None = None
    windowed_rrmse: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = [self.rmse, self.rrmse, self.picp, *self.windowed_rrmse]
        values += [v for v in (self.amrmse, self.nll, self.wasserstein1) if v is not None]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("metric report contains non-finite values")
        if not 0.0 <= self.picp <= 1.0:
            raise ValueError("picp must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metric_report(
    ensemble: np.ndarray,
    truth: np.ndarray,
    weights: np.ndarray | None = None,
    reference: np.ndarray | None = None,
    reference_weights: np.ndarray | None = None,
    param_samples: np.ndarray | None = None,
    reference_params: np.ndarray | None = None,
    window: int | None = None,
) -> MetricReport:
    """Score an ensemble series ``(T, N, d)`` against the truth ``(T, d)``.

    With a ``reference`` ensemble (e.g. the high-fidelity posterior), AMRMSE
    and the NLL of the reference mean are added; with parameter samples from
    both runs, their Wasserstein-1 distance.
    """
    est = weighted_mean(ensemble, weights)
    window = window or len(truth)
    amr = nll = w1 = None
    if reference is not None:
        amr = amrmse(ensemble, reference, weights, reference_weights)
        nll = nll_gaussian(ensemble, weighted_mean(reference, reference_weights), weights)
    if param_samples is not None and reference_params is not None:
        w1 = wasserstein1_1d(param_samples, reference_params)
    return MetricReport(
        rmse=rmse(est, truth),
        rrmse=rrmse(est, truth),
        picp=picp(ensemble, truth, weights=weights),
        amrmse=amr,
        nll=nll,
        wasserstein1=w1,
        windowed_rrmse=windowed_rrmse(est, truth, window).tolist(),
    )
