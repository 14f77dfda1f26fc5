import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlspf.metrics import (
    METRIC_REPORT_SCHEMA,
    MetricReport,
    amrmse,
    central_moments,
    metric_report,
    nll_gaussian,
    picp,
    rmse,
    rrmse,
    wasserstein1_1d,
    weighted_mean,
    weighted_quantile,
    windowed_rrmse,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
samples = arrays(np.float64, st.integers(1, 12), elements=finite)


# ------------------------------------------------------------ point metrics
def test_rmse_examples():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert rmse(x, x) == 0
    assert rmse(x + 1, x) == pytest.approx(1.0, abs=1e-12)
    assert rmse(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_rmse_symmetric_rrmse_not():
    a, b = np.array([1.0, 2.0]), np.array([2.0, 4.0])
    assert rmse(a, b) == rmse(b, a)
    assert rrmse(a, b) != rrmse(b, a)
    assert rrmse(a, b) == pytest.approx(math.sqrt(5) / math.sqrt(20))


def test_point_metric_errors():
    with pytest.raises(ValueError):
        rmse(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        rrmse(np.ones(2), np.zeros(2))


# --------------------------------------------------------------- ensembles
def test_weighted_mean_and_moments():
    ens = np.array([[0.0], [2.0], [4.0]])
    np.testing.assert_allclose(weighted_mean(ens), [2.0])
    np.testing.assert_allclose(weighted_mean(ens, np.array([1.0, 0.0, 1.0])), [2.0])
    np.testing.assert_allclose(weighted_mean(ens, np.array([0.0, 0.0, 5.0])), [4.0])
    m2, m3, m4 = central_moments(ens)
    np.testing.assert_allclose([m2[0], m3[0], m4[0]], [8 / 3, 0.0, 32 / 3])


def test_weighted_quantile():
    ens = np.array([[3.0], [1.0], [2.0], [4.0]])
    assert weighted_quantile(ens, None, 0.5)[0] == 2.0
    assert weighted_quantile(ens, None, 0.0)[0] == 1.0
    assert weighted_quantile(ens, None, 1.0)[0] == 4.0
    assert weighted_quantile(ens, np.array([0.0, 0.0, 0.0, 1.0]), 0.1)[0] == 4.0


def test_amrmse_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 50, 3))
    assert amrmse(a, a) == 0
    assert amrmse(a, a[:, rng.permutation(50)]) == pytest.approx(0.0, abs=1e-12)


def test_amrmse_gaussian_second_moment():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(10_000, 1))
    b = 2.0 * rng.normal(size=(10_000, 1))
    m2 = central_moments(a, orders=(2,))[0], central_moments(b, orders=(2,))[0]
    assert rmse(*m2) == pytest.approx(3.0, rel=0.05)
    # third moments vanish, fourth differ by 3*(16-1) = 45
    expected = (3.0 + 0.0 + 45.0) / 3
    assert amrmse(a, b) == pytest.approx(expected, rel=0.1)


def test_amrmse_needs_five_members():
    with pytest.raises(ValueError):
        amrmse(np.zeros((4, 2)), np.zeros((6, 2)))
    with pytest.raises(ValueError):
        amrmse(np.zeros((5, 2)), np.zeros((5, 3)))


def test_picp_examples():
    rng = np.random.default_rng(0)
    ens = rng.normal(size=(6, 200, 4))
    assert picp(ens, np.median(ens, axis=-2)) == 1.0
    assert picp(ens, ens.max(axis=-2) + 10) == 0.0
    truth = np.median(ens, axis=-2)
    truth[:3] = ens.max(axis=-2)[:3] + 1
    assert picp(ens, truth) == 0.5


def test_picp_weighted_matches_unweighted_for_large_uniform():
    ens = np.random.default_rng(2).normal(size=(3, 2001, 2))
    truth = np.zeros((3, 2))
    assert picp(ens, truth, weights=np.full((3, 2001), 1.0)) == picp(ens, truth)


def test_nll_at_mode():
    ens = np.array([[-1.0], [1.0], [-1.0], [1.0], [-1.0], [1.0]])
    sigma2 = 1.0
    assert nll_gaussian(ens, np.array([0.0])) == pytest.approx(0.5 * math.log(2 * math.pi * sigma2), abs=1e-12)


def test_nll_convex_in_log_sigma():
    base = np.array([-1.0, 1.0] * 50)[:, None]
    sigmas = np.exp(np.linspace(-3, 3, 61))
    nll = np.array([nll_gaussian(s * base, np.array([1.0])) for s in sigmas])
    i = int(np.argmin(nll))
    assert 0 < i < len(sigmas) - 1
    assert np.all(np.diff(nll[: i + 1]) < 0) and np.all(np.diff(nll[i:]) > 0)
    assert sigmas[i] == pytest.approx(1.0, rel=0.1)


def test_nll_permutation_invariant_and_floor():
    ens = np.random.default_rng(3).normal(size=(5, 30, 2))
    ref = np.zeros((5, 2))
    perm = np.random.default_rng(4).permutation(30)
    assert nll_gaussian(ens[:, perm], ref) == pytest.approx(nll_gaussian(ens, ref), abs=1e-12)
    assert math.isfinite(nll_gaussian(np.zeros((6, 1)), np.zeros(1)))


# -------------------------------------------------------------- wasserstein
def test_wasserstein_examples():
    a = np.random.default_rng(0).normal(size=40)
    assert wasserstein1_1d(a, a) == 0
    assert wasserstein1_1d(a, a + 2.5) == pytest.approx(2.5, abs=1e-12)
    assert wasserstein1_1d([0, 1], [1, 2]) == pytest.approx(1.0)
    assert wasserstein1_1d([0.0, 1.0], [0.0, 1.0, 1.0], [1, 1], [1, 0, 0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        wasserstein1_1d([], [1.0])


def test_wasserstein_sorted_mean_abs_difference():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=25), rng.exponential(size=25)
    assert wasserstein1_1d(a, b) == pytest.approx(np.mean(np.abs(np.sort(a) - np.sort(b))), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(samples, samples, samples)
def test_wasserstein_metric_axioms(a, b, c):
    ab, ba = wasserstein1_1d(a, b), wasserstein1_1d(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, abs=1e-9)
    assert wasserstein1_1d(a, np.random.default_rng(0).permutation(a)) == pytest.approx(0.0, abs=1e-9)
    assert ab <= wasserstein1_1d(a, c) + wasserstein1_1d(c, b) + 1e-8


@settings(max_examples=100, deadline=None)
@given(samples)
def test_wasserstein_identity_of_indiscernibles(a):
    b = a.copy()
    b[0] += 1.0
    assert wasserstein1_1d(a, b) > 0


# ----------------------------------------------------------------- windows
def test_windowed_rrmse():
    t = np.random.default_rng(0).uniform(1, 2, size=(10, 3))
    np.testing.assert_allclose(windowed_rrmse(1.1 * t, t, 4), 0.1, rtol=1e-12)
    whole = windowed_rrmse(t + 0.3, t, 10)
    assert whole.shape == (1,) and whole[0] == pytest.approx(rrmse(t + 0.3, t))
    est = t.copy()
    est[:5] += 0.5
    tail = windowed_rrmse(est, t, 3)
    assert np.all(tail[5:] < tail[0])
    with pytest.raises(ValueError):
        windowed_rrmse(t, t, 11)


# ------------------------------------------------------------------ report
def _ensembles():
    rng = np.random.default_rng(5)
    truth = rng.normal(size=(6, 4))
    ens = truth[:, None, :] + 0.3 * rng.normal(size=(6, 40, 4))
    ref = truth[:, None, :] + 0.3 * rng.normal(size=(6, 50, 4))
    return truth, ens, ref


def test_report_validates_against_schema():
    truth, ens, ref = _ensembles()
    rep = metric_report(ens, truth, reference=ref, param_samples=ens[-1, :, 0], reference_params=ref[-1, :, 0], window=3)
    jsonschema.validate(rep.to_dict(), METRIC_REPORT_SCHEMA)
    jsonschema.validate(metric_report(ens, truth).to_dict(), METRIC_REPORT_SCHEMA)
    assert len(rep.windowed_rrmse) == 4


def test_self_comparison_is_zero():
    truth, ens, _ = _ensembles()
    rep = metric_report(ens, weighted_mean(ens), reference=ens, param_samples=ens[-1, :, 0], reference_params=ens[-1, :, 0])
    assert rep.rmse == 0 and rep.amrmse == 0 and rep.wasserstein1 == 0


def test_report_permutation_invariant():
    truth, ens, ref = _ensembles()
    perm = np.random.default_rng(0).permutation(40)
    a = metric_report(ens, truth, reference=ref).to_dict()
    b = metric_report(ens[:, perm], truth, reference=ref).to_dict()
    for key in ("rmse", "rrmse", "picp", "amrmse", "nll"):
        assert a[key] == pytest.approx(b[key], abs=1e-12)


def test_report_rejects_bad_values():
    with pytest.raises(ValueError):
        MetricReport(rmse=float("nan"), rrmse=0.0, picp=0.5)
    with pytest.raises(ValueError):
        MetricReport(rmse=0.0, rrmse=0.0, picp=1.5)
