"""Noise schedules, the closed-form forward process and the DDPM/DDIM reverse samplers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .optim import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep; index 0 holds the data endpoint (alpha_bar_0 = 1)."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[t]


def linear_schedule(T: int = 200, beta_start: float = 5e-4, beta_end: float = 0.1) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alphas = 1.0 - betas
    alpha_bars = np.empty(T + 1)
    alpha_bars[0] = 1.0
    for t in range(1, T + 1):
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t]
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars)


def desk_schedule(T: int = 200) -> NoiseSchedule:
    """Linear schedule with the reference (T=1000, 1e-4..0.02) endpoints rescaled by 1000/T."""
    scale = 1000.0 / T
    return linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]: {t}")
    return t


def _float(x) -> np.ndarray:
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


def _per_item(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` may be a scalar or one value per batch item."""
    x0 = _float(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = _check_t(t, schedule)
    ab = _per_item(schedule.alpha_bars[t], x0.ndim)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray | None, schedule: NoiseSchedule) -> np.ndarray:
    """Ancestral step with posterior variance sigma_t^2 = beta_t; ``z`` is ignored at t = 1."""
    if t < 1 or t > schedule.T:
        raise ValueError(f"timestep out of range [1, {schedule.T}]: {t}")
    x_t = _float(x_t)
    beta = schedule.betas[t]
    mean = (x_t - (beta / np.sqrt(1.0 - schedule.alpha_bars[t])) * eps_hat) / np.sqrt(schedule.alphas[t])
    if t > 1 and z is not None:
        mean = mean + np.sqrt(beta) * z
    return mean.astype(x_t.dtype, copy=False)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``; ``t_prev = 0`` is the data endpoint."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    if t_prev < 0 or t > schedule.T:
        raise ValueError(f"timesteps ({t}, {t_prev}) outside [0, {schedule.T}]")
    x_t = _float(x_t)
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev]
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if t_prev == 0:
        return x0_hat.astype(x_t.dtype, copy=False)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return out.astype(x_t.dtype, copy=False)


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Evenly spaced strictly decreasing subsequence from T down to 1."""
    if not 1 <= num_steps <= T:
        raise ConfigError(f"num_inference_steps must lie in [1, {T}], got {num_steps}")
    if num_steps == 1:
        return np.array([T])
    return np.floor(np.linspace(T, 1, num_steps) + 0.5).astype(int)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    num_inference_steps: int | None = None
    seed: int = 0

    def steps_for(self, T: int) -> int:
        if self.kind == "ddpm":
            if self.num_inference_steps not in (None, T):
                raise ConfigError(f"DDPM runs the full chain of {T} steps, got num_inference_steps={self.num_inference_steps}")
            return T
        if self.kind != "ddim":
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        n = self.num_inference_steps if self.num_inference_steps is not None else max(1, T // 20)
        if n > T:
            raise ConfigError(f"num_inference_steps ({n}) exceeds T ({T})")
        return n


# model(x_t, mask_channel, t_batch) -> eps_hat, all numpy arrays
EpsModel = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def sample_rngs(seed: int, indices) -> list[np.random.Generator]:
    """One independent stream per sample index, so results do not depend on batching or threads."""
    return [np.random.default_rng([seed, int(i)]) for i in indices]


def sample(
    model: EpsModel,
    mask_channel: np.ndarray,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    rngs: list[np.random.Generator] | None = None,
    image_channels: int = 1,
    dtype=np.float32,
) -> np.ndarray:
    """Run the reverse chain for a batch of encoded masks of shape (N, 1, H, W).

    The mask channel is handed to ``model`` at every step.  Each batch item
    draws its x_T (and DDPM noise) from its own generator in ``rngs``.
    """
    mask_channel = np.asarray(mask_channel, dtype=dtype)
    if mask_channel.ndim != 4 or mask_channel.shape[1] != 1:
        raise ValueError(f"mask channel must have shape (N, 1, H, W), got {mask_channel.shape}")
    n, _, h, w = mask_channel.shape
    if rngs is None:
        rngs = sample_rngs(sampler.seed, range(n))
    if len(rngs) != n:
        raise ValueError(f"need one generator per sample ({n}), got {len(rngs)}")
    num_steps = sampler.steps_for(schedule.T)
    x = np.stack([r.standard_normal((image_channels, h, w)) for r in rngs]).astype(dtype)

    if sampler.kind == "ddim":
        steps = ddim_timesteps(schedule.T, num_steps)
        for i, t in enumerate(steps):
            t_prev = int(steps[i + 1]) if i + 1 < len(steps) else 0
            eps_hat = model(x, mask_channel, np.full(n, t, dtype=int))
            x = ddim_step(x, int(t), t_prev, eps_hat, schedule)
    else:
        for t in range(schedule.T, 0, -1):
            eps_hat = model(x, mask_channel, np.full(n, t, dtype=int))
            z = np.stack([r.standard_normal((image_channels, h, w)) for r in rngs]).astype(dtype) if t > 1 else None
            x = ddpm_step(x, t, eps_hat, z, schedule)
    return x
