"""Wasserstein autoencoder with patch-based transformer reduction/expansion layers.

A :class:`ViTLayer` cuts a ``(channels, length)`` signal into ``p`` equal
patches, embeds each flattened patch, runs a transformer encoder block across
the patches and projects every token back to a patch of a *different* shape.
Stacking layers that shrink the patch length while growing the channel
count gives a convolution-like down/up-sampling path with global attention.

The training objective is reconstruction MSE plus L2 weight decay, an
unbiased MMD penalty (multiquadratics kernel) pulling encodings toward a
standard-normal prior, and a latent consistency term
``||z - enc(dec(z))||^2`` on prior draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionConfig, EncoderBlock, positional_encoding
from .autodiff import (
    AdamState,
    Dense,
    Module,
    Tensor,
    adam_step,
    clip_grad_norm,
    concatenate,
    lr_at,
    no_grad,
    rng_stream,
    square_sum,
)
from .autodiff import LrSchedule

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Inconsistent model configuration or inputs that violate it."""


class TrainingDivergenceError(FloatingPointError):
    """Loss became NaN/Inf during training."""


# ------------------------------------------------------------------ patches
@dataclass(frozen=True)
class PatchSpec:
    num_patches: int
    in_channels: int
    in_length: int
    embed_dim: int
    out_channels: int
    out_patch_len: int
    num_heads: int = 2
    num_blocks: int = 1

    def __post_init__(self) -> None:
        if self.in_length % self.num_patches:
            raise ConfigurationError(
                f"length {self.in_length} not divisible into {self.num_patches} patches"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")

    @property
    def patch_len(self) -> int:
        return self.in_length // self.num_patches

    @property
    def out_length(self) -> int:
        return self.num_patches * self.out_patch_len


def patchify(x: Tensor, p: int) -> Tensor:
    """``(..., C, N)`` -> ``(..., p, C, N/p)``: contiguous segments, order kept."""
    *lead, c, n = x.shape
    if n % p:
        raise ConfigurationError(f"length {n} not divisible into {p} patches")
    k = len(lead)
    y = x.reshape(*lead, c, p, n // p)
    return y.transpose(*range(k), k + 1, k, k + 2)


def unpatchify(x: Tensor) -> Tensor:
    """Inverse of :func:`patchify`: ``(..., p, C, L)`` -> ``(..., C, p*L)``."""
    *lead, p, c, length = x.shape
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, c, p * length)


class ViTLayer(Module):
    """Patch-wise reduction/expansion: ``(C_in, N_in) -> (C_out, p * out_patch_len)``."""

    def __init__(self, spec: PatchSpec, rng: np.random.Generator, dtype=np.float64) -> None:
        self.spec = spec
        self.embed = Dense(spec.in_channels * spec.patch_len, spec.embed_dim, rng, dtype=dtype)
        attn = AttentionConfig(spec.embed_dim, spec.num_heads, spec.num_patches)
        self.blocks = [EncoderBlock(attn, rng, dtype=dtype) for _ in range(spec.num_blocks)]
        self.project = Dense(spec.embed_dim, spec.out_channels * spec.out_patch_len, rng, dtype=dtype)
        self._pe = positional_encoding(spec.num_patches, spec.embed_dim).astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        if x.shape[-2:] != (s.in_channels, s.in_length):
            raise ConfigurationError(f"ViT layer expects (..., {s.in_channels}, {s.in_length}), got {x.shape}")
        lead = x.shape[:-2]
        tokens = patchify(x, s.num_patches).reshape(*lead, s.num_patches, s.in_channels * s.patch_len)
        h = self.embed(tokens) + self._pe
        for block in self.blocks:
            h = block(h)
        out = self.project(h).reshape(*lead, s.num_patches, s.out_channels, s.out_patch_len)
        return unpatchify(out)


def vit_layer_forward(x: Tensor, layer: ViTLayer) -> Tensor:
    return layer(x)


# -------------------------------------------------------------- autoencoder
@dataclass(frozen=True)
class LayerPlan:
    num_patches: int
    embed_dim: int
    out_channels: int
    out_patch_len: int
    num_heads: int = 2
    num_blocks: int = 1


@dataclass(frozen=True)
class AEConfig:
    """Architecture of the autoencoder.

    ``encoder_layers`` describe the reduction path; the decoder mirrors it
    automatically (same patch counts, reversed shapes).
    """

    state_channels: int = 1
    state_length: int = 128
    latent_dim: int = 16
    param_dim: int = 0
    encoder_layers: tuple[LayerPlan, ...] = (
        LayerPlan(num_patches=8, embed_dim=32, out_channels=4, out_patch_len=8),
        LayerPlan(num_patches=8, embed_dim=32, out_channels=8, out_patch_len=4),
    )
    head_activation: str = "gelu"
    dtype: str = "float64"

    @classmethod
    def from_dict(cls, d: dict) -> AEConfig:
        d = dict(d)
        if "encoder_layers" in d:
            d["encoder_layers"] = tuple(LayerPlan(**lp) for lp in d["encoder_layers"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def specs(self) -> tuple[list[PatchSpec], list[PatchSpec]]:
        enc: list[PatchSpec] = []
        c, n = self.state_channels, self.state_length
        for lp in self.encoder_layers:
            spec = PatchSpec(lp.num_patches, c, n, lp.embed_dim, lp.out_channels, lp.out_patch_len, lp.num_heads, lp.num_blocks)
            enc.append(spec)
            c, n = spec.out_channels, spec.out_length
        dec: list[PatchSpec] = []
        for spec in reversed(enc):
            dec.append(
                PatchSpec(
                    spec.num_patches, spec.out_channels, spec.out_length, spec.embed_dim,
                    spec.in_channels, spec.patch_len, spec.num_heads, spec.num_blocks,
                )
            )
        return enc, dec


class Autoencoder(Module):
    """Encoder ``q -> z`` and (optionally parameter-conditioned) decoder ``(z, m) -> q``.

    Tensor methods take ``(..., C, N)`` states. The numpy helpers use
    ``(..., N)`` for single-channel models and ``(..., C, N)`` otherwise.
    """

    def __init__(self, cfg: AEConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        enc_specs, dec_specs = cfg.specs()
        self.enc_layers = [ViTLayer(s, rng, dtype) for s in enc_specs]
        last = enc_specs[-1] if enc_specs else None
        self._bottleneck = (
            (last.out_channels, last.out_length) if last else (cfg.state_channels, cfg.state_length)
        )
        flat = self._bottleneck[0] * self._bottleneck[1]
        self.enc_head = Dense(flat, cfg.latent_dim, rng, dtype=dtype)
        self.dec_lift = Dense(cfg.latent_dim + cfg.param_dim, flat, rng, activation=cfg.head_activation, dtype=dtype)
        self.dec_layers = [ViTLayer(s, rng, dtype) for s in dec_specs]

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.dtype)

    def encode(self, q: Tensor) -> Tensor:
        h = q
        for layer in self.enc_layers:
            h = layer(h)
        return self.enc_head(h.reshape(*q.shape[:-2], -1))

    def decode(self, z: Tensor, m: Tensor | None = None) -> Tensor:
        if (m is None) != (self.cfg.param_dim == 0):
            raise ConfigurationError(
                "decoder parameter input required" if m is None else "decoder takes no parameters"
            )
        if m is not None:
            if m.shape[-1] != self.cfg.param_dim:
                raise ConfigurationError(f"expected {self.cfg.param_dim} parameters, got {m.shape[-1]}")
            z = concatenate([z, m], axis=-1)
        h = self.dec_lift(z).reshape(*z.shape[:-1], *self._bottleneck)
        for layer in self.dec_layers:
            h = layer(h)
        return h

    def forward(self, q: Tensor, m: Tensor | None = None) -> Tensor:
        return self.decode(self.encode(q), m)

    # numpy conveniences (no tape)
    def _as_state(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=self.dtype)
        if self.cfg.state_channels == 1:
            q = q[..., None, :]
        if q.shape[-2:] != (self.cfg.state_channels, self.cfg.state_length):
            raise ConfigurationError(
                f"state shape {q.shape} incompatible with {self.cfg.state_channels}x{self.cfg.state_length}"
            )
        return q

    def encode_numpy(self, q: np.ndarray) -> np.ndarray:
        q = self._as_state(q)
        with no_grad():
            return self.encode(Tensor(q)).data

    def decode_numpy(self, z: np.ndarray, m: np.ndarray | None = None) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        if z.shape[-1] != self.latent_dim:
            raise ConfigurationError(f"latent width {z.shape[-1]} != {self.latent_dim}")
        with no_grad():
            out = self.decode(Tensor(z), None if m is None else Tensor(np.asarray(m, dtype=self.dtype))).data
        return out[..., 0, :] if self.cfg.state_channels == 1 else out


def weight_penalty(model: Module) -> Tensor:
    """Sum of squared entries of every weight matrix (biases and norms excluded)."""
    terms = [square_sum(p) for name, p in model.named_parameters() if name.endswith("weight")]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ------------------------------------------------------------- normalization
@dataclass
class NormStats:
    """Per-channel min/max of the training states (and of the parameters)."""

    state_min: np.ndarray
    state_max: np.ndarray
    param_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    param_max: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        for lo, hi in ((self.state_min, self.state_max), (self.param_min, self.param_max)):
            if np.any(np.asarray(hi) < np.asarray(lo)):
                raise ValueError("max must be >= min per channel")

    @classmethod
    def fit(cls, states: np.ndarray, params: np.ndarray | None = None) -> NormStats:
        """``states`` is ``(n, C, N)``; ``params`` is ``(n, N_m)``."""
        states = np.asarray(states, dtype=np.float64)
        smin = states.min(axis=(0, 2))
        smax = states.max(axis=(0, 2))
        if params is None or np.size(params) == 0:
            return cls(smin, smax)
        params = np.asarray(params, dtype=np.float64)
        return cls(smin, smax, params.min(axis=0), params.max(axis=0))

    def normalize_state(self, q: np.ndarray) -> np.ndarray:
        return _minmax(q, self.state_min, self.state_max, channel_axis=-2)

    def denormalize_state(self, q: np.ndarray) -> np.ndarray:
        return _minmax_inv(q, self.state_min, self.state_max, channel_axis=-2)

    def normalize_params(self, m: np.ndarray) -> np.ndarray:
        return _minmax(m, self.param_min, self.param_max, channel_axis=None)

    def denormalize_params(self, m: np.ndarray) -> np.ndarray:
        return _minmax_inv(m, self.param_min, self.param_max, channel_axis=None)

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {
            "norm.state_min": self.state_min, "norm.state_max": self.state_max,
            "norm.param_min": self.param_min, "norm.param_max": self.param_max,
        }

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> NormStats:
        return cls(t["norm.state_min"], t["norm.state_max"], t["norm.param_min"], t["norm.param_max"])


def _channel_view(v: np.ndarray, q: np.ndarray, channel_axis: int | None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if channel_axis is None or q.ndim < 2 or v.size == 1:
        return v if v.size != 1 else v.reshape(())
    return v[:, None]


def _minmax(q: np.ndarray, lo: np.ndarray, hi: np.ndarray, channel_axis: int | None) -> np.ndarray:
    """Affine map of each channel's ``[lo, hi]`` onto ``[0, 1]``; degenerate channels go to 0.5."""
    q = np.asarray(q, dtype=np.float64)
    lo_v, hi_v = _channel_view(lo, q, channel_axis), _channel_view(hi, q, channel_axis)
    span = hi_v - lo_v
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (q - lo_v) / safe, 0.5)


def _minmax_inv(q: np.ndarray, lo: np.ndarray, hi: np.ndarray, channel_axis: int | None) -> np.ndarray:
    """Inverse of :func:`_minmax`; degenerate channels return ``lo``."""
    q = np.asarray(q, dtype=np.float64)
    lo_v, hi_v = _channel_view(lo, q, channel_axis), _channel_view(hi, q, channel_axis)
    return lo_v + q * (hi_v - lo_v)


def minmax_normalize(q: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.normalize_state(q)


def minmax_denormalize(q_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.denormalize_state(q_norm)


# -------------------------------------------------------------------- losses
def multiquadratic_kernel(a: Tensor, b: Tensor, c: float) -> Tensor:
    """Gram matrix ``C / (C + ||a_i - b_j||^2)`` for ``a: (N, d)``, ``b: (M, d)``."""
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    sq = (diff * diff).sum(axis=-1)
    return c / (sq + c)


def mmd_loss(encoded: Tensor, prior: Tensor, c: float, biased: bool = False) -> Tensor:
    """Squared MMD between encodings and prior draws, multiquadratics kernel.

    The default is the unbiased U-statistic (off-diagonal within-set sums over
    ``N(N-1)``), which can be negative. ``biased=True`` gives the V-statistic
    (all pairs over ``N^2``), which is always >= 0.

    Raises:
        ValueError: If fewer than two samples are given or set sizes differ.
    """
    if not isinstance(encoded, Tensor):
        encoded = Tensor(encoded)
    if not isinstance(prior, Tensor):
        prior = Tensor(prior)
    n = encoded.shape[0]
    if n < 2:
        raise ValueError("MMD needs at least two samples")
    if prior.shape != encoded.shape:
        raise ValueError(f"sample sets differ in shape: {encoded.shape} vs {prior.shape}")
    kzz = multiquadratic_kernel(encoded, encoded, c)
    kxx = multiquadratic_kernel(prior, prior, c)
    kzx = multiquadratic_kernel(encoded, prior, c)
    if biased:
        within = (kzz.sum() + kxx.sum()) * (1.0 / (n * n))
    else:
        # the kernel diagonal is exactly 1 (zero distance)
        within = (kzz.sum() + kxx.sum() - 2.0 * n) * (1.0 / (n * (n - 1)))
    return within - kzx.sum() * (2.0 / (n * n))


def consistency_loss(model: Autoencoder, z: Tensor, m: Tensor | None = None) -> Tensor:
    """Mean over samples of ``||z - enc(dec(z, m))||^2``."""
    diff = z - model.encode(model.decode(z, m))
    return (diff * diff).sum(axis=-1).mean()


@dataclass(frozen=True)
class WaeLossWeights:
    alpha: float = 1e-6  # weight regularization
    beta: float = 1e-2  # MMD divergence
    lam: float = 1e-3  # consistency
    kernel_c: float | None = None  # None -> 2 * latent_dim

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.lam) < 0 or (self.kernel_c is not None and self.kernel_c <= 0):
            raise ValueError("loss weights must be >= 0 and kernel constant > 0")


def wae_total_loss(
    model: Autoencoder,
    q: Tensor,
    weights: WaeLossWeights,
    prior_z: Tensor | None = None,
    m: Tensor | None = None,
    prior_m: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Reconstruction MSE + alpha*R + beta*MMD + lambda*C, with components reported.

    Terms whose weight is zero are skipped (reported as 0).
    """
    z = model.encode(q)
    err = model.decode(z, m) - q
    recon = (err * err).mean()
    total = recon
    parts = {"recon": float(recon.data), "reg": 0.0, "mmd": 0.0, "consistency": 0.0}
    if weights.alpha > 0:
        reg = weight_penalty(model)
        parts["reg"] = float(reg.data)
        total = total + weights.alpha * reg
    if weights.beta > 0:
        if prior_z is None:
            raise ValueError("MMD term needs prior samples")
        c = weights.kernel_c or 2.0 * model.latent_dim
        mmd = mmd_loss(z, prior_z, c)
        parts["mmd"] = float(mmd.data)
        total = total + weights.beta * mmd
    if weights.lam > 0:
        if prior_z is None:
            raise ValueError("consistency term needs prior samples")
        cons = consistency_loss(model, prior_z, prior_m)
        parts["consistency"] = float(cons.data)
        total = total + weights.lam * cons
    parts["total"] = float(total.data)
    return total, parts


# ------------------------------------------------------------------ training
@dataclass(frozen=True)
class AETrainConfig:
    iterations: int = 3000
    batch_size: int = 64
    base_lr: float = 2e-3
    min_lr: float = 1e-5
    warmup: int = 100
    clip: float | None = None
    weights: WaeLossWeights = field(default_factory=WaeLossWeights)
    seed: int = 0
    log_every: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> AETrainConfig:
        d = dict(d)
        if "weights" in d:
            d["weights"] = WaeLossWeights(**d["weights"])
        return cls(**d)


@dataclass
class TrainResult:
    model: Module
    stats: NormStats | None
    history: list[dict[str, float]]


def as_channels(states: np.ndarray, channels: int) -> np.ndarray:
    """Reshape ``(n, N)`` single-channel data to ``(n, 1, N)``; pass through otherwise."""
    states = np.asarray(states)
    if channels == 1 and states.ndim == 2:
        return states[:, None, :]
    return states


def train_autoencoder(
    states: np.ndarray,
    cfg: AEConfig,
    train: AETrainConfig,
    params: np.ndarray | None = None,
) -> TrainResult:
    """Fit a WAE on raw (unnormalized) snapshots.

    Args:
        states: ``(n, C, N)`` or ``(n, N)`` training snapshots.
        cfg: Architecture.
        train: Optimization recipe and loss weights.
        params: ``(n, N_m)`` parameters for a conditioned decoder.

    Returns:
        The trained model, the fitted normalization and per-iteration loss
        components.

    Raises:
        TrainingDivergenceError: If the loss becomes non-finite.
    """
    states = as_channels(states, cfg.state_channels)
    if (params is None) != (cfg.param_dim == 0):
        raise ConfigurationError("params must be given iff cfg.param_dim > 0")
    stats = NormStats.fit(states, params)
    dtype = np.dtype(cfg.dtype)
    data = stats.normalize_state(states).astype(dtype)
    pdata = None if params is None else stats.normalize_params(params).astype(dtype)

    model = Autoencoder(cfg, rng_stream(train.seed, "ae-init"))
    plist = model.parameters()
    state = AdamState.for_params([p.data for p in plist])
    sched = LrSchedule(train.base_lr, train.warmup, train.iterations, train.min_lr)
    batch_rng = rng_stream(train.seed, "ae-batches")
    prior_rng = rng_stream(train.seed, "ae-prior")
    history: list[dict[str, float]] = []
    w = train.weights
    need_prior = w.beta > 0 or w.lam > 0
    bs = min(train.batch_size, len(data))

    for it in range(train.iterations):
        idx = batch_rng.choice(len(data), size=bs, replace=False)
        q = Tensor(data[idx])
        m = None if pdata is None else Tensor(pdata[idx])
        prior_z = prior_m = None
        if need_prior:
            prior_z = Tensor(prior_rng.standard_normal((bs, cfg.latent_dim)).astype(dtype))
            if cfg.param_dim:
                prior_m = Tensor(prior_rng.uniform(0.0, 1.0, (bs, cfg.param_dim)).astype(dtype))
        model.zero_grad()
        loss, parts = wae_total_loss(model, q, w, prior_z, m, prior_m)
        if not math.isfinite(parts["total"]):
            raise TrainingDivergenceError(f"non-finite AE loss at iteration {it}: {parts}")
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
        if train.clip:
            grads = clip_grad_norm(grads, train.clip)
        adam_step([p.data for p in plist], grads, state, lr=lr_at(sched, it))
        parts["iteration"] = it
        history.append(parts)
        if train.log_every and it % train.log_every == 0:
            log.info("ae it %d total %.3e recon %.3e mmd %.3e cons %.3e", it, parts["total"], parts["recon"], parts["mmd"], parts["consistency"])
    return TrainResult(model, stats, history)


def smoothed(values: list[float] | np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
