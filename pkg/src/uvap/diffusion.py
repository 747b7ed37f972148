"""Noise schedule, closed-form forward process, CFG, and the DDIM walk.

The sampler is the deterministic (eta = 0) variant over a uniformly strided
timestep subsequence; `ddim_trajectory` takes an arbitrary epsilon callback
so ideal-denoiser probes can drive the exact same update rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached cumulative products.

    `betas[i]` is the variance added at timestep i+1; `alpha_bars` has a
    leading 1.0 so that alpha_bars[t] indexes timestep t directly and
    alpha_bars[0] represents the clean signal.
    """

    t_train: int
    betas: np.ndarray        # (T,)
    alphas: np.ndarray       # (T,)
    alpha_bars: np.ndarray   # (T + 1,), alpha_bars[0] == 1

    def abar(self, t) -> np.ndarray:
        return self.alpha_bars[t]


def build_schedule(t_train: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if t_train < 2:
        raise ConfigError(f"t_train must be >= 2, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(t_train=t_train, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    `t` may be a scalar or a (B,) array matching the batch dimension of z0.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeMismatchError(f"z0 {z0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.t_train):
        raise IndexError(f"t must lie in [1, {schedule.t_train}]")
    abar = schedule.alpha_bars[t_arr]
    if t_arr.ndim == 1:
        abar = abar.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond)."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatchError(
            f"eps_cond {eps_cond.shape} vs eps_uncond {eps_uncond.shape}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(t_train: int, steps: int) -> np.ndarray:
    """Uniformly strided descending subsequence of [1, t_train]."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if steps > t_train:
        raise ConfigError(f"steps ({steps}) may not exceed t_train ({t_train})")
    return np.unique(np.round(np.linspace(t_train, 1, steps)).astype(np.int64))[::-1]


def ddim_trajectory(eps_fn, z_init: np.ndarray, schedule: NoiseSchedule,
                    taus: np.ndarray) -> np.ndarray:
    """Deterministic DDIM from z at taus[0] down to the clean estimate.

    eps_fn(z, t) returns the predicted noise for the whole batch at integer
    timestep t. The final step targets alpha_bar = 1, i.e. the x0 estimate.
    """
    z = np.asarray(z_init)
    abars = schedule.alpha_bars
    for i, t in enumerate(taus):
        eps = eps_fn(z, int(t))
        a_t = abars[int(t)]
        x0 = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        t_next = int(taus[i + 1]) if i + 1 < len(taus) else 0
        a_n = abars[t_next]
        z = np.sqrt(a_n) * x0 + np.sqrt(1.0 - a_n) * eps
    return z
