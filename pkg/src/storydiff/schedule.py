"""Cosine noise schedule and forward/reverse diffusion kinematics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise coefficients.

    beta[i] is the variance added at step i+1 (length T);
    alpha_bar has length T+1 with alpha_bar[0] == 1 by convention and is
    strictly decreasing with alpha_bar[T] > 0.
    """

    timesteps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    variance_mode: str = "beta"

    def alpha(self, t: int) -> float:
        return float(self.alpha_bar[t] / self.alpha_bar[t - 1])

    def step_variance(self, t: int) -> float:
        """Reverse-step variance: beta_t, or the posterior variance
        (1 - abar_{t-1}) / (1 - abar_t) * beta_t behind the config flag."""
        b = float(self.beta[t - 1])
        if self.variance_mode == "beta":
            return b
        num = 1.0 - float(self.alpha_bar[t - 1])
        den = 1.0 - float(self.alpha_bar[t])
        return b * num / den


def make_cosine_schedule(
    timesteps: int, offset: float = 0.008, variance_mode: str = "beta"
) -> DiffusionSchedule:
    """Cosine schedule: abar_t = f(t)/f(0), f(t) = cos^2(((t/T+s)/(1+s)) * pi/2).

    Per-step betas are 1 - abar_t/abar_{t-1} clipped to <= 0.999, and
    alpha_bar is rebuilt from the clipped betas so the identity
    beta_t = 1 - abar_t/abar_{t-1} holds exactly.
    """
    if timesteps < 2:
        raise ConfigError(f"timesteps must be >= 2, got {timesteps}")
    if offset <= 0:
        raise ConfigError(f"offset must be > 0, got {offset}")
    if variance_mode not in ("beta", "posterior"):
        raise ConfigError(f"variance_mode must be beta|posterior, got {variance_mode!r}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((t / timesteps + offset) / (1.0 + offset)) * (np.pi / 2.0)) ** 2
    raw_abar = f / f[0]
    beta = np.clip(1.0 - raw_abar[1:] / raw_abar[:-1], None, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return DiffusionSchedule(timesteps, beta, alpha_bar, variance_mode)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule):
    """Forward jump x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    t = 0 returns x0 exactly (abar_0 = 1 convention); eps is the caller's
    standard-normal draw, same shape as x0.
    """
    if not 0 <= t <= sched.timesteps:
        raise IndexError(f"t={t} outside [0, {sched.timesteps}]")
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    noise,
    sched: DiffusionSchedule,
) -> np.ndarray:
    """One ancestral step x_{t-1} = mu + sigma_t * noise.

    mu reconstructs the posterior mean from the noise prediction:
    mu = (x_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t).
    The final step (t = 1) is deterministic; callers must pass zero noise.
    """
    if not 1 <= t <= sched.timesteps:
        raise IndexError(f"t={t} outside [1, {sched.timesteps}]")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    noise = np.asarray(noise, dtype=x_t.dtype)
    if t == 1 and np.any(noise != 0):
        raise ContractError("reverse_step: t=1 is deterministic, noise must be zero")
    beta_t = float(sched.beta[t - 1])
    ab_t = float(sched.alpha_bar[t])
    alpha_t = sched.alpha(t)
    mu = (x_t - (beta_t / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(alpha_t)
    sigma = np.sqrt(sched.step_variance(t))
    return mu + sigma * noise


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal step encoding: sin/cos halves, frequencies geometric
    from 1 down to 1/10000. Values are bounded by 1 in magnitude."""
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])
