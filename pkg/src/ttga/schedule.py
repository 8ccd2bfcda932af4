"""Noise schedules and latent-grid helpers.

A latent grid is a plain float64 ndarray; images and latents share the same
representation. The schedule precomputes, in double precision,

    alpha_bar[t] = prod_{i<=t} alpha_i          (alpha_bar[0] = 1 exactly)
    gamma[t]     = sqrt((1 - alpha_bar[t]) / alpha_bar[t])   (gamma[0] = 0 exactly)

together with the rescaled-latent convention

    xbar_t = x_t / sqrt(alpha_bar[t])

under which a deterministic denoising step between arbitrary timesteps is a
straight-line update along the predicted noise (see sampler module).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalAbort

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion schedule tables.

    ``alphas`` has length T and is 1-indexed conceptually (``alphas[t-1]`` is
    alpha_t); ``alpha_bars`` and ``gammas`` have length T+1 with index 0
    holding the exact endpoint values 1 and 0.
    """

    total_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        for arr in (self.alphas, self.alpha_bars, self.gammas):
            arr.setflags(write=False)

    def alpha(self, t: int) -> float:
        self.check_step(t, low=1)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha_bars[t])

    def gamma(self, t: int) -> float:
        self.check_step(t)
        return float(self.gammas[t])

    def check_step(self, t: int, low: int = 0) -> None:
        if not low <= t <= self.total_steps:
            raise IndexError(
                f"step index {t} outside [{low}, {self.total_steps}]"
            )


def build_schedule(
    total_steps: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear-beta schedule: beta_t linearly spaced, alpha_t = 1 - beta_t.

    Endpoint values alpha_bar[0] = 1 and gamma[0] = 0 are stored exactly
    rather than evaluated through the formulas, so downstream code can rely
    on them bit-for-bit.
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0.0 < beta_start <= beta_end:
        raise ConfigError(
            f"beta_start must satisfy 0 < beta_start <= beta_end, got beta_start={beta_start}"
        )
    if beta_end >= 1.0:
        raise ConfigError(f"beta_end must be < 1, got beta_end={beta_end}")

    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.empty(total_steps + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.cumprod(alphas)
    gammas = np.empty(total_steps + 1, dtype=np.float64)
    gammas[0] = 0.0
    gammas[1:] = np.sqrt((1.0 - alpha_bars[1:]) / alpha_bars[1:])
    return NoiseSchedule(total_steps, alphas, alpha_bars, gammas)


def to_xbar(x: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """xbar_t = x_t / sqrt(alpha_bar[t])."""
    schedule.check_step(t)
    return x / np.sqrt(schedule.alpha_bars[t])


def from_xbar(xbar: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = xbar_t * sqrt(alpha_bar[t]); inverse of to_xbar."""
    schedule.check_step(t)
    return xbar * np.sqrt(schedule.alpha_bars[t])


def gaussian_grid(rng, shape) -> np.ndarray:
    """I.i.d. standard-normal grid, reproducible per (seed, stream_id)."""
    return rng.normal(shape)


def ensure_finite(x: np.ndarray, context: str) -> np.ndarray:
    """Raise NumericalAbort if the grid holds NaN/Inf; returns x unchanged."""
    if not np.all(np.isfinite(x)):
        raise NumericalAbort(f"non-finite latent values in {context}")
    return x
