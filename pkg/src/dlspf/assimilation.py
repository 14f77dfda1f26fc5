"""State-space pieces shared by the high-fidelity and latent filters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .wae import Autoencoder, NormStats


@dataclass
class AugmentedState:
    """Physical state ``q`` (flattened) and parameters ``m``, batched over leading axes."""

    q: np.ndarray
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class LatentAugmentedState:
    z: np.ndarray
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian with independent components of standard deviation ``std``."""

    std: float | tuple[float, ...] = 0.0

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.std) < 0):
            raise ValueError("std must be >= 0")

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        return rng.standard_normal(shape) * np.asarray(self.std)


@dataclass(frozen=True)
class ObservationOperator:
    """Selects sensor nodes (and optionally one channel) from a state.

    States are ``(..., nx)`` for one channel or ``(..., n_channels, nx)`` when
    ``channel`` is set.
    """

    indices: tuple[int, ...]
    grid_size: int
    channel: int | None = None

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.grid_size):
            raise IndexError(f"sensor indices out of bounds for grid of size {self.grid_size}")

    @property
    def num_obs(self) -> int:
        return len(self.indices)

    @classmethod
    def identity(cls, n: int) -> ObservationOperator:
        return cls(tuple(range(n)), n)


def observe(q: np.ndarray, h: ObservationOperator) -> np.ndarray:
    """Noise-free observation: the sensor values of ``q`` in sensor order."""
    q = np.asarray(q)
    if q.shape[-1] != h.grid_size:
        raise IndexError(f"state width {q.shape[-1]} != operator grid size {h.grid_size}")
    if h.channel is not None:
        q = q[..., h.channel, :]
    return q[..., list(h.indices)]


def gaussian_log_likelihood(residual: np.ndarray, std: float | np.ndarray) -> np.ndarray:
    """Sum over the last axis of independent Gaussian log densities.

    Raises:
        ValueError: If any ``std`` is not positive.
    """
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    r = np.asarray(residual, dtype=np.float64)
    var = std * std
    return np.sum(-0.5 * np.log(2.0 * math.pi * var) - r * r / (2.0 * var), axis=-1)


def latent_observe(
    a: LatentAugmentedState,
    decoder: Autoencoder,
    h: ObservationOperator,
    norm_stats: NormStats,
) -> np.ndarray:
    """Synthetic observation of a latent state: decode, denormalize, observe."""
    q_norm = decoder.decode_numpy(a.z, a.m if a.m.size else None)
    return observe(norm_stats.denormalize_state(q_norm), h)
