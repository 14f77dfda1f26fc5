"""Transformer time stepping in latent space.

The stepper maps a window of ``k + 1`` latent states (and optionally a
parameter vector) to the next latent state. The parameter vector is lifted
to a token that is placed in front of the state tokens; causal self-attention
runs over ``[g(m), z_{n-k}, ..., z_n]`` and the last position is read out as
an increment added to ``z_n``.

Training unrolls the model ``s`` steps on its own predictions (no teacher
forcing) and sums the squared latent errors of every unrolled step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionConfig, EncoderBlock, positional_encoding
from .autodiff import (
    AdamState,
    Dense,
    LayerNorm,
    LrSchedule,
    Module,
    Tensor,
    adam_step,
    clip_grad_norm,
    concatenate,
    lr_at,
    no_grad,
    param,
    rng_stream,
)
from .wae import ConfigurationError, TrainingDivergenceError, weight_penalty

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepperConfig:
    """Architecture and stochastic settings of the latent stepper.

    Attributes:
        memory: ``k``; the model sees ``k + 1`` past states.
        unroll: ``s``; number of recursive steps in the training loss.
        time_stride: Physical time steps advanced per latent step.
        latent_noise_std: Std of the latent model error added during filtering.
    """

    latent_dim: int = 16
    memory: int = 4
    unroll: int = 4
    param_dim: int = 0
    embed_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    alpha: float = 0.0
    time_stride: int = 1
    latent_noise_std: float = 0.0
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.memory < 1 or self.unroll < 1 or self.time_stride < 1:
            raise ConfigurationError("need memory >= 1, unroll >= 1 and time_stride >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.alpha < 0 or self.latent_noise_std < 0:
            raise ConfigurationError("alpha and latent_noise_std must be >= 0")

    @property
    def window(self) -> int:
        return self.memory + 1

    @classmethod
    def from_dict(cls, d: dict) -> StepperConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class LatentStepper(Module):
    def __init__(self, cfg: StepperConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        e = cfg.embed_dim
        self.param_enc = Dense(cfg.param_dim, e, rng, dtype=dtype) if cfg.param_dim else None
        self.lift = Dense(cfg.latent_dim, e, rng, dtype=dtype)
        n_tokens = cfg.window + (1 if cfg.param_dim else 0)
        attn = AttentionConfig(e, cfg.num_heads, n_tokens)
        self.blocks = [EncoderBlock(attn, rng, dtype=dtype) for _ in range(cfg.num_blocks)]
        self.norm = LayerNorm(e, dtype=dtype)
        # zero head: an untrained stepper is the persistence model z_{n+1} = z_n
        self.head = Dense(e, cfg.latent_dim, rng, zero_init=True, dtype=dtype)
        self.out_scale = param(np.ones(cfg.latent_dim), dtype)
        self._pe = positional_encoding(n_tokens, e).astype(dtype)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.dtype)

    def param_token(self, m: Tensor) -> Tensor:
        if self.param_enc is None:
            raise ConfigurationError("stepper was built without parameters")
        if m.shape[-1] != self.cfg.param_dim:
            raise ConfigurationError(f"expected {self.cfg.param_dim} parameters, got {m.shape[-1]}")
        return self.param_enc(m)

    def forward(self, history: Tensor, m: Tensor | None = None) -> Tensor:
        """``history``: ``(..., k + 1, latent_dim)`` -> next state ``(..., latent_dim)``."""
        cfg = self.cfg
        if history.shape[-2:] != (cfg.window, cfg.latent_dim):
            raise ConfigurationError(f"history must end in ({cfg.window}, {cfg.latent_dim}), got {history.shape}")
        if (m is None) != (cfg.param_dim == 0):
            raise ConfigurationError("parameter input required" if m is None else "stepper takes no parameters")
        lead = history.shape[:-2]
        tokens = self.lift(history)
        if m is not None:
            g = self.param_token(m).reshape(*lead, 1, cfg.embed_dim)
            tokens = concatenate([g, tokens], axis=-2)
        h = tokens + self._pe
        for block in self.blocks:
            h = block(h, causal=True)
        last = self.norm(h[..., -1, :])
        return history[..., -1, :] + self.head(last) * self.out_scale


# ------------------------------------------------------------- numpy API
def pad_history(history: np.ndarray, window: int) -> np.ndarray:
    """Left-pad by repeating the earliest state, or keep the last ``window`` states."""
    history = np.asarray(history)
    n = history.shape[-2]
    if n == 0:
        raise ValueError("history must contain at least one state")
    if n >= window:
        return history[..., n - window :, :]
    first = np.repeat(history[..., :1, :], window - n, axis=-2)
    return np.concatenate([first, history], axis=-2)


def param_encode(stepper: LatentStepper, m: np.ndarray) -> np.ndarray:
    with no_grad():
        return stepper.param_token(Tensor(np.asarray(m, dtype=stepper.dtype))).data


def step(stepper: LatentStepper, history: np.ndarray, m: np.ndarray | None = None) -> np.ndarray:
    """``z_{n+1} = f(z_{n-k:n}; m)`` for a (possibly short) history ``(..., n, latent_dim)``."""
    h = pad_history(np.asarray(history, dtype=stepper.dtype), stepper.cfg.window)
    with no_grad():
        mt = None if m is None else Tensor(np.asarray(m, dtype=stepper.dtype))
        return stepper(Tensor(h), mt).data


def rollout(stepper: LatentStepper, history: np.ndarray, m: np.ndarray | None, steps: int) -> np.ndarray:
    """Recursive prediction; returns the padded window followed by ``steps`` new states."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    window = stepper.cfg.window
    traj = pad_history(np.asarray(history, dtype=stepper.dtype), window)
    out = [traj]
    for _ in range(steps):
        z = step(stepper, traj[..., -window:, :], m)
        traj = np.concatenate([traj[..., 1 - window :, :], z[..., None, :]], axis=-2)
        out.append(z[..., None, :])
    return np.concatenate(out, axis=-2)


# -------------------------------------------------------------- training
def unrolled_loss(
    stepper: LatentStepper,
    history: Tensor,
    targets: Tensor,
    m: Tensor | None = None,
    alpha: float = 0.0,
) -> Tensor:
    """Mean over the batch of ``sum_i ||f^i(history) - z_{n+i}||^2`` plus ``alpha * R``.

    Args:
        history: ``(B, k + 1, d)`` windows.
        targets: ``(B, s, d)`` the next ``s`` true states.
    """
    s = targets.shape[-2]
    total = None
    hist = history
    for i in range(s):
        pred = stepper(hist, m)
        diff = pred - targets[:, i, :]
        term = (diff * diff).sum()
        total = term if total is None else total + term
        hist = concatenate([hist[:, 1:, :], pred.reshape(pred.shape[0], 1, pred.shape[1])], axis=1)
    loss = total * (1.0 / targets.shape[0])
    if alpha > 0:
        loss = loss + alpha * weight_penalty(stepper)
    return loss


@dataclass(frozen=True)
class StepperTrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup: int = 100
    clip: float | None = 1.0
    seed: int = 0
    log_every: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> StepperTrainConfig:
        return cls(**d)


@dataclass
class StepperResult:
    model: LatentStepper
    history: list[dict[str, float]]


def _windows(n_traj: int, n_states: int, k: int, s: int) -> np.ndarray:
    """All ``(trajectory, n)`` pairs with ``s`` targets available after ``n``."""
    starts = np.arange(n_states - s)
    return np.stack(np.meshgrid(np.arange(n_traj), starts, indexing="ij"), axis=-1).reshape(-1, 2)


def gather_windows(latents: np.ndarray, pairs: np.ndarray, k: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Histories (repeat-padded at trajectory start) and unrolled targets."""
    traj, n = pairs[:, 0], pairs[:, 1]
    hist_idx = np.maximum(n[:, None] + np.arange(-k, 1)[None, :], 0)
    tgt_idx = n[:, None] + np.arange(1, s + 1)[None, :]
    return latents[traj[:, None], hist_idx], latents[traj[:, None], tgt_idx]


def train_stepper(
    latents: np.ndarray,
    cfg: StepperConfig,
    train: StepperTrainConfig,
    params: np.ndarray | None = None,
) -> StepperResult:
    """Fit the stepper on latent trajectories with the unrolled loss.

    Args:
        latents: ``(n_traj, n_steps + 1, latent_dim)`` at the physical time step;
            subsampled by ``cfg.time_stride`` here.
        params: ``(n_traj, param_dim)`` normalized parameters.

    Raises:
        ConfigurationError: On latent or parameter dimension mismatch.
        TrainingDivergenceError: If the loss becomes non-finite.
    """
    latents = np.asarray(latents)
    if latents.ndim != 3 or latents.shape[-1] != cfg.latent_dim:
        raise ConfigurationError(f"latents must be (n_traj, n_steps + 1, {cfg.latent_dim}), got {latents.shape}")
    if (params is None) != (cfg.param_dim == 0):
        raise ConfigurationError("params must be given iff cfg.param_dim > 0")
    dtype = np.dtype(cfg.dtype)
    z = latents[:, :: cfg.time_stride].astype(dtype)
    n_states = z.shape[1]
    if n_states < cfg.unroll + 1:
        raise ConfigurationError("trajectories too short for the unroll length")
    pdata = None if params is None else np.asarray(params, dtype=dtype).reshape(len(z), cfg.param_dim)

    model = LatentStepper(cfg, rng_stream(train.seed, "stepper-init"))
    # per-dimension scale of one latent increment, so the head predicts O(1) values
    model.out_scale.data[:] = np.sqrt(np.mean(np.diff(z, axis=1) ** 2, axis=(0, 1))) + 1e-8
    plist = model.parameters()
    state = AdamState.for_params([p.data for p in plist])
    sched = LrSchedule(train.base_lr, train.warmup, train.iterations, train.min_lr)
    batch_rng = rng_stream(train.seed, "stepper-batches")
    pairs = _windows(len(z), n_states, cfg.memory, cfg.unroll)
    bs = min(train.batch_size, len(pairs))
    history: list[dict[str, float]] = []

    for it in range(train.iterations):
        pick = pairs[batch_rng.choice(len(pairs), size=bs, replace=False)]
        hist, tgt = gather_windows(z, pick, cfg.memory, cfg.unroll)
        m = None if pdata is None else Tensor(pdata[pick[:, 0]])
        model.zero_grad()
        loss = unrolled_loss(model, Tensor(hist), Tensor(tgt), m, cfg.alpha)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"non-finite stepper loss at iteration {it}")
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
        if train.clip:
            grads = clip_grad_norm(grads, train.clip)
        adam_step([p.data for p in plist], grads, state, lr=lr_at(sched, it))
        history.append({"iteration": it, "loss": value})
        if train.log_every and it % train.log_every == 0:
            log.info("stepper it %d loss %.3e", it, value)
    return StepperResult(model, history)
