import numpy as np
import pytest

from dlspf.autodiff import Tensor, gradcheck, rng_stream
from dlspf.stepper import (
    LatentStepper,
    StepperConfig,
    StepperTrainConfig,
    gather_windows,
    pad_history,
    param_encode,
    rollout,
    step,
    train_stepper,
    unrolled_loss,
)
from dlspf.wae import ConfigurationError, TrainingDivergenceError

SMALL = StepperConfig(latent_dim=3, memory=2, unroll=3, embed_dim=8, num_blocks=1, num_heads=2)
PARAM = StepperConfig(latent_dim=3, memory=2, unroll=2, param_dim=2, embed_dim=8, num_blocks=1, num_heads=2)


def _trained_like(cfg, seed=0):
    """Stepper with a non-zero head so the network output actually depends on its inputs."""
    model = LatentStepper(cfg, rng_stream(seed, "test"))
    model.head.weight.data[:] = np.random.default_rng(seed).standard_normal(model.head.weight.data.shape) * 0.5
    return model


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------------ config
def test_config_validation_and_round_trip():
    for bad in ({"memory": 0}, {"unroll": 0}, {"time_stride": 0}, {"embed_dim": 9}, {"latent_noise_std": -1}):
        with pytest.raises(ConfigurationError):
            StepperConfig(**bad)
    assert StepperConfig.from_dict(PARAM.to_dict()) == PARAM
    assert SMALL.window == 3


# ------------------------------------------------------------------- step
def test_untrained_stepper_is_persistence():
    model = LatentStepper(SMALL, rng_stream(0, "init"))
    hist = np.random.default_rng(0).normal(size=(4, 3, 3))
    np.testing.assert_array_equal(step(model, hist), hist[:, -1])


def test_step_shape_and_determinism():
    model = _trained_like(SMALL)
    hist = np.random.default_rng(1).normal(size=(5, 3, 3))
    out = step(model, hist)
    assert out.shape == (5, 3)
    np.testing.assert_array_equal(out, step(model, hist))


def test_causality_fixed_window():
    model = _trained_like(SMALL)
    rng = np.random.default_rng(2)
    hist = rng.normal(size=(1, 3, 3))
    base = step(model, hist)
    longer = np.concatenate([rng.normal(size=(1, 4, 3)), hist], axis=1)
    np.testing.assert_array_equal(step(model, longer), base)
    for j in range(3):
        changed = hist.copy()
        changed[0, j] += 1.0
        assert not np.allclose(step(model, changed), base)


def test_short_history_is_repeat_padded():
    model = _trained_like(SMALL)
    z0 = np.random.default_rng(3).normal(size=(2, 1, 3))
    np.testing.assert_array_equal(step(model, z0), step(model, np.repeat(z0, 3, axis=1)))


def test_pad_history():
    h = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(pad_history(h[:1], 3), [[0, 1], [0, 1], [0, 1]])
    np.testing.assert_array_equal(pad_history(h, 2), h[1:])
    with pytest.raises(ValueError):
        pad_history(h[:0], 2)


def test_shape_errors():
    model = _trained_like(SMALL)
    with pytest.raises(ConfigurationError):
        model(t(np.zeros((1, 3, 4))))
    with pytest.raises(ConfigurationError):
        model(t(np.zeros((1, 3, 3))), t(np.zeros((1, 2))))
    pmodel = _trained_like(PARAM)
    with pytest.raises(ConfigurationError):
        pmodel(t(np.zeros((1, 3, 3))))
    with pytest.raises(ConfigurationError):
        param_encode(pmodel, np.zeros((1, 3)))
    with pytest.raises(ConfigurationError):
        param_encode(model, np.zeros((1, 2)))


# ------------------------------------------------------------- parameters
def test_param_token_contract():
    model = _trained_like(PARAM)
    m = np.array([[0.2, 0.7]])
    tok = param_encode(model, m)
    assert tok.shape == (1, 8)
    np.testing.assert_array_equal(tok, param_encode(model, m))
    assert not np.allclose(tok, param_encode(model, m + 0.1))


def test_parameter_changes_predictions():
    model = _trained_like(PARAM)
    hist = np.random.default_rng(4).normal(size=(1, 3, 3))
    a = rollout(model, hist, np.array([[0.0, 0.0]]), 3)
    b = rollout(model, hist, np.array([[1.0, -1.0]]), 3)
    assert not np.allclose(a[:, 3:], b[:, 3:])


# ---------------------------------------------------------------- rollout
@pytest.mark.parametrize("steps", [1, 2, 7])
def test_rollout_length(steps):
    model = _trained_like(SMALL)
    hist = np.random.default_rng(5).normal(size=(2, 3, 3))
    assert rollout(model, hist, None, steps).shape == (2, SMALL.window + steps, 3)


def test_rollout_one_step_equals_step():
    model = _trained_like(SMALL)
    hist = np.random.default_rng(6).normal(size=(2, 3, 3))
    np.testing.assert_array_equal(rollout(model, hist, None, 1)[:, -1], step(model, hist))


def test_rollout_deterministic_and_recursive():
    model = _trained_like(SMALL)
    hist = np.random.default_rng(7).normal(size=(2, 3, 3))
    a = rollout(model, hist, None, 4)
    np.testing.assert_array_equal(a, rollout(model, hist, None, 4))
    np.testing.assert_array_equal(a[:, 4], step(model, a[:, 1:4]))


def test_rollout_needs_a_step():
    with pytest.raises(ValueError):
        rollout(_trained_like(SMALL), np.zeros((1, 3, 3)), None, 0)


# ------------------------------------------------------------------- loss
def test_loss_zero_for_perfect_predictor():
    model = LatentStepper(SMALL, rng_stream(0, "init"))  # persistence
    hist = np.ones((2, 3, 3))
    assert float(unrolled_loss(model, t(hist), t(np.ones((2, 3, 3)))).data) == 0.0


def test_loss_s1_is_one_step_mse_sum():
    model = _trained_like(SMALL)
    rng = np.random.default_rng(8)
    hist, tgt = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 1, 3))
    expected = np.sum((step(model, hist) - tgt[:, 0]) ** 2) / 4
    assert float(unrolled_loss(model, t(hist), t(tgt)).data) == pytest.approx(expected, rel=1e-12)


def test_loss_unrolls_without_teacher_forcing():
    model = _trained_like(SMALL)
    rng = np.random.default_rng(9)
    hist, tgt = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    preds = rollout(model, hist, None, 3)[:, 3:]
    expected = np.sum((preds - tgt) ** 2) / 2
    assert float(unrolled_loss(model, t(hist), t(tgt)).data) == pytest.approx(expected, rel=1e-12)


def test_loss_penalty_added():
    model = _trained_like(SMALL)
    rng = np.random.default_rng(10)
    hist, tgt = t(rng.normal(size=(2, 3, 3))), t(rng.normal(size=(2, 1, 3)))
    assert float(unrolled_loss(model, hist, tgt, alpha=0.1).data) > float(unrolled_loss(model, hist, tgt).data)


def test_full_stepper_gradcheck():
    model = _trained_like(PARAM, seed=1)
    for seed in range(10):
        r = np.random.default_rng(300 + seed)
        hist = t(r.standard_normal((2, 3, 3)), grad=True)
        tgt = t(r.standard_normal((2, 2, 3)))
        m = t(r.standard_normal((2, 2)), grad=True)
        assert gradcheck(lambda: unrolled_loss(model, hist, tgt, m, alpha=0.01), [hist, m] + model.parameters()) < 1e-5


# --------------------------------------------------------------- training
def test_gather_windows_repeat_pads_start():
    z = np.arange(12.0).reshape(1, 6, 2)
    hist, tgt = gather_windows(z, np.array([[0, 0]]), 2, 2)
    np.testing.assert_array_equal(hist[0], [[0, 1], [0, 1], [0, 1]])
    np.testing.assert_array_equal(tgt[0], [[2, 3], [4, 5]])


def _toy_latents():
    ts = np.linspace(0, 2 * np.pi, 41)
    phase = np.linspace(0, 1, 12)[:, None]
    return np.stack([np.sin(ts + phase), np.cos(ts + phase), 0.5 * np.sin(2 * (ts + phase))], axis=-1)


def test_training_reduces_loss_and_is_deterministic():
    z = _toy_latents()
    tc = StepperTrainConfig(iterations=400, batch_size=16, base_lr=3e-3, warmup=10, log_every=0)
    a = train_stepper(z, SMALL, tc)
    b = train_stepper(z, SMALL, tc)
    first = np.mean([h["loss"] for h in a.history[:10]])
    last = np.mean([h["loss"] for h in a.history[-10:]])
    assert last < 0.1 * first
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]


def test_training_time_stride_and_params():
    z = _toy_latents()
    cfg = StepperConfig(**{**PARAM.to_dict(), "time_stride": 2})
    res = train_stepper(z, cfg, StepperTrainConfig(iterations=5, batch_size=4, warmup=1, log_every=0), np.zeros((12, 2)))
    assert len(res.history) == 5


def test_training_guards():
    z = _toy_latents()
    tc = StepperTrainConfig(iterations=2, batch_size=4, warmup=1, log_every=0)
    with pytest.raises(ConfigurationError):
        train_stepper(z[..., :2], SMALL, tc)
    with pytest.raises(ConfigurationError):
        train_stepper(z, PARAM, tc)
    with pytest.raises(ConfigurationError):
        train_stepper(z[:, :3], SMALL, tc)
    with pytest.raises(TrainingDivergenceError):
        train_stepper(z * np.nan, SMALL, tc)
