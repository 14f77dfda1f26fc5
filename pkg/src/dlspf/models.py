"""High-fidelity forward models.

* Viscous Burgers equation on ``[0, L]`` with homogeneous Dirichlet
  boundaries, central second-order differences and fixed-step classical RK4.
* A linear-Gaussian state-space model with its exact Kalman filter, used as
  the analytic reference for the particle filters.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .autodiff.rng import rng_stream


class BlowUpError(FloatingPointError):
    """The state became non-finite or exceeded the blow-up threshold."""


BLOWUP_LIMIT = 1e3


@dataclass(frozen=True)
class BurgersConfig:
    length: float = 2.0
    nx: int = 128
    viscosity: float = 1.0 / 150.0
    dt: float = 1e-3
    n_steps: int = 300
    q_lo: float = 0.5
    q_hi: float = 1.5
    sensor_positions: tuple[float, ...] = (0.0, 0.286, 0.571, 0.857, 1.143, 1.429, 1.714, 2.0)

    def __post_init__(self) -> None:
        if self.nx < 3:
            raise ValueError("nx must be >= 3")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.q_lo > self.q_hi:
            raise ValueError("q_lo must be <= q_hi")

    @property
    def dx(self) -> float:
        return self.length / (self.nx - 1)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.nx)

    def sensor_indices(self) -> np.ndarray:
        """Nearest grid node of every sensor position."""
        idx = np.rint(np.asarray(self.sensor_positions) / self.dx).astype(np.int64)
        return np.clip(idx, 0, self.nx - 1)


def burgers_rhs(q: np.ndarray, cfg: BurgersConfig, viscosity: float | np.ndarray | None = None) -> np.ndarray:
    """``nu q_xx - q q_x`` at interior nodes, zero at the two boundary nodes.

    The advection term uses the skew-symmetric central form
    ``(q q_x + (q^2)_x) / 3``, which is algebraically equal to ``q q_x`` but
    discretely energy conserving with zero Dirichlet values; the plain
    ``q (q_{i+1} - q_{i-1}) / 2dx`` stencil blows up on the 128-node grid once
    the front steepens for amplitudes near 1.5.

    ``q`` may carry leading batch axes; ``viscosity`` may be an array
    broadcastable against ``q[..., :1]`` for per-particle viscosities.
    """
    nu = cfg.viscosity if viscosity is None else viscosity
    dx = cfg.dx
    out = np.zeros_like(q)
    left, mid, right = q[..., :-2], q[..., 1:-1], q[..., 2:]
    diffusion = nu * (right - 2.0 * mid + left) / (dx * dx)
    advection = (mid * (right - left) + (right * right - left * left)) / (6.0 * dx)
    out[..., 1:-1] = diffusion - advection
    return out


def rk4_step(q: np.ndarray, dt: float, rhs: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step.

    Raises:
        BlowUpError: If the result is non-finite.
    """
    k1 = rhs(q)
    k2 = rhs(q + 0.5 * dt * k1)
    k3 = rhs(q + 0.5 * dt * k2)
    k4 = rhs(q + dt * k3)
    out = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise BlowUpError("non-finite state after RK4 step")
    return out


def initial_condition(x: np.ndarray, amplitude: float | np.ndarray, length: float) -> np.ndarray:
    amp = np.asarray(amplitude, dtype=np.float64)[..., None]
    return amp * np.sin(2.0 * np.pi * np.asarray(x) / length)


def burgers_initial_state(cfg: BurgersConfig, amplitude: float | np.ndarray) -> np.ndarray:
    q0 = initial_condition(cfg.grid, amplitude, cfg.length)
    q0[..., 0] = 0.0
    q0[..., -1] = 0.0
    return q0


def burgers_forward(
    q: np.ndarray, cfg: BurgersConfig, n_steps: int = 1, viscosity: float | np.ndarray | None = None
) -> np.ndarray:
    """Advance ``q`` (any leading batch axes) by ``n_steps`` RK4 steps.

    Raises:
        BlowUpError: On non-finite values or ``max|q| > 1e3``.
    """
    rhs = lambda s: burgers_rhs(s, cfg, viscosity)  # noqa: E731
    for _ in range(n_steps):
        q = rk4_step(q, cfg.dt, rhs)
    if np.max(np.abs(q), initial=0.0) > BLOWUP_LIMIT:
        raise BlowUpError("Burgers state exceeded blow-up threshold")
    return q


def simulate_burgers(cfg: BurgersConfig, amplitude: float | np.ndarray, q0: np.ndarray | None = None) -> np.ndarray:
    """Trajectory including the t=0 snapshot, shape ``(..., n_steps + 1, nx)``.

    ``amplitude`` may be an array of amplitudes, simulated together.
    """
    q = burgers_initial_state(cfg, amplitude) if q0 is None else np.array(q0, dtype=np.float64)
    traj = np.empty(q.shape[:-1] + (cfg.n_steps + 1, cfg.nx))
    traj[..., 0, :] = q
    for n in range(cfg.n_steps):
        q = burgers_forward(q, cfg)
        traj[..., n + 1, :] = q
    return traj


@dataclass
class BurgersDataset:
    trajectories: np.ndarray  # (n_traj, n_steps + 1, nx)
    amplitudes: np.ndarray  # (n_traj,)

    @property
    def snapshots(self) -> np.ndarray:
        return self.trajectories.reshape(-1, self.trajectories.shape[-1])

    @property
    def snapshot_params(self) -> np.ndarray:
        n_t = self.trajectories.shape[1]
        return np.repeat(self.amplitudes, n_t)[:, None]


def draw_amplitudes(cfg: BurgersConfig, n: int, seed: int, split: str = "train") -> np.ndarray:
    """One i.i.d. ``U[q_lo, q_hi]`` amplitude per trajectory, each from its own stream."""
    return np.array([rng_stream(seed, ("amplitude", split, i)).uniform(cfg.q_lo, cfg.q_hi) for i in range(n)])


def generate_dataset(cfg: BurgersConfig, n_train: int, seed: int, split: str = "train") -> BurgersDataset:
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    amps = draw_amplitudes(cfg, n_train, seed, split)
    return BurgersDataset(simulate_burgers(cfg, amps), amps)


def discrete_energy(q: np.ndarray, dx: float) -> np.ndarray:
    return 0.5 * dx * np.sum(q * q, axis=-1)


# --------------------------------------------------------------- linear-Gaussian
@dataclass
class LinearGaussianSSM:
    """``x_n = A x_{n-1} + w``, ``y_n = H x_n + v`` with Gaussian ``w``, ``v``, ``x_0``."""

    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    _chol: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.A, self.H, self.Q, self.R, self.P0 = (np.atleast_2d(np.asarray(a, float)) for a in (self.A, self.H, self.Q, self.R, self.P0))
        self.m0 = np.atleast_1d(np.asarray(self.m0, float))
        d, o = self.A.shape[0], self.H.shape[0]
        if self.A.shape != (d, d) or self.H.shape != (o, d) or self.Q.shape != (d, d) or self.R.shape != (o, o):
            raise ValueError("inconsistent SSM dimensions")
        for name, cov in (("Q", self.Q), ("R", self.R), ("P0", self.P0)):
            if not np.allclose(cov, cov.T) or np.min(np.linalg.eigvalsh(cov)) < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semi-definite")

    @classmethod
    def scalar(cls, a: float, q: float, h: float, r: float, m0: float = 0.0, p0: float = 1.0) -> LinearGaussianSSM:
        return cls([[a]], [[h]], [[q]], [[r]], [m0], [[p0]])

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    def _sqrt(self, name: str) -> np.ndarray:
        if name not in self._chol:
            cov = getattr(self, name)
            w, v = np.linalg.eigh(cov)
            self._chol[name] = v * np.sqrt(np.clip(w, 0.0, None))
        return self._chol[name]

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.m0 + rng.standard_normal((n, self.state_dim)) @ self._sqrt("P0").T

    def process_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.state_dim)) @ self._sqrt("Q").T

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.A.T

    def observe(self, x: np.ndarray) -> np.ndarray:
        return x @ self.H.T

    def simulate(self, n_steps: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Truth states ``x_0..x_T`` and observations ``y_1..y_T``."""
        rng = rng_stream(seed, "lgssm-truth")
        x = self.sample_initial(rng, 1)[0]
        xs, ys = [x], []
        sqrt_r = self._sqrt("R")
        for _ in range(n_steps):
            x = self.A @ x + self._sqrt("Q") @ rng.standard_normal(self.state_dim)
            ys.append(self.H @ x + sqrt_r @ rng.standard_normal(self.H.shape[0]))
            xs.append(x)
        return np.array(xs), np.array(ys)


class SingularInnovationError(np.linalg.LinAlgError):
    pass


def kalman_filter(ssm: LinearGaussianSSM, observations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact filtering means and covariances after each observation ``y_1..y_T``.

    An all-zero innovation covariance (no prior uncertainty and no observation
    noise) leaves the prediction unchanged.

    Raises:
        SingularInnovationError: If an innovation covariance cannot be inverted.
    """
    m, P = ssm.m0.copy(), ssm.P0.copy()
    obs = np.asarray(observations, float).reshape(len(observations), -1)
    means, covs = [], []
    eye = np.eye(ssm.state_dim)
    for y in obs:
        m = ssm.A @ m
        P = ssm.A @ P @ ssm.A.T + ssm.Q
        S = ssm.H @ P @ ssm.H.T + ssm.R
        if not np.any(S):
            # Noise-free prediction of a noise-free observation: nothing to update.
            means.append(m.copy())
            covs.append(P.copy())
            continue
        if np.linalg.cond(S) > 1e14:
            raise SingularInnovationError("innovation covariance is singular")
        K = np.linalg.solve(S, ssm.H @ P).T
        m = m + K @ (y - ssm.H @ m)
        P = (eye - K @ ssm.H) @ P
        P = 0.5 * (P + P.T)
        means.append(m.copy())
        covs.append(P.copy())
    return np.array(means), np.array(covs)
