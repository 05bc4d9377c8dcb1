"""Noise schedules, closed-form noising, reconstruction-parameterised
denoising with optional return-gradient guidance, and observation conditioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import MlpParams, check_finite, mlp_forward, time_embed

MAX_BETA = 0.999


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are indexed by step 0..N; index 0 is the clean-data convention
    (beta=0, alpha=alpha_bar=1)."""

    n_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray
    kind: str = "custom"

    @classmethod
    def from_betas(cls, betas, kind="custom") -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("need at least one diffusion step")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        omab = 1.0 - alpha_bar
        # 1 - (1 - beta_1) can round away from beta_1; pin the exact value
        omab[1] = beta[1]
        return cls(len(betas), beta, alpha, alpha_bar, omab, kind)

    def posterior_coefficients(self, i):
        i = np.asarray(i)
        c_x = np.sqrt(self.alpha[i]) * (1.0 - self.alpha_bar[i - 1]) / self.one_minus_alpha_bar[i]
        c_x0 = np.sqrt(self.alpha_bar[i - 1]) * self.beta[i] / self.one_minus_alpha_bar[i]
        return c_x, c_x0


def cosine_alpha_bar(t, s: float = 0.008):
    """Continuous cosine-schedule signal level, normalised to 1 at t=0 (t in [0, 1])."""
    f = np.cos((np.asarray(t, dtype=np.float64) + s) / (1.0 + s) * np.pi / 2.0) ** 2
    f0 = np.cos(s / (1.0 + s) * np.pi / 2.0) ** 2
    return f / f0


def make_schedule(kind: str = "cosine", n_steps: int = 20, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> DiffusionSchedule:
    if n_steps < 1:
        raise ConfigError(f"diffusion step count must be >= 1, got {n_steps}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, n_steps)
    elif kind == "cosine":
        ab = cosine_alpha_bar(np.arange(n_steps + 1) / n_steps)
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, MAX_BETA)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule.from_betas(betas, kind)


def _column(coef, x):
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim)) if coef.ndim else coef


def _check_step(schedule, i, low=1):
    i = np.asarray(i)
    if np.any(i < low) or np.any(i > schedule.n_steps):
        raise IndexError(f"diffusion step {i} outside [{low}, {schedule.n_steps}]")
    return i


def forward_sample(x0, i, noise, schedule: DiffusionSchedule):
    """x_i = sqrt(abar_i) x0 + sqrt(1 - abar_i) noise. `i` may be a per-row array."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise DimensionError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    i = _check_step(schedule, i)
    a = _column(np.sqrt(schedule.alpha_bar[i]), x0)
    b = _column(np.sqrt(schedule.one_minus_alpha_bar[i]), x0)
    return a * x0 + b * noise


def model_input(x, i, params: MlpParams) -> np.ndarray:
    """Concatenate the flattened window with the sinusoidal embedding of `i`;
    embedding width is whatever the network's input layer leaves over."""
    x = np.asarray(x, dtype=np.float64)
    emb_dim = params.sizes[0] - x.shape[-1]
    if emb_dim < 0:
        raise DimensionError(f"window of width {x.shape[-1]} exceeds network input {params.sizes[0]}")
    emb = time_embed(np.broadcast_to(np.asarray(i), x.shape[:-1]), emb_dim) if emb_dim else \
        np.zeros(x.shape[:-1] + (0,))
    return np.concatenate([x, emb], axis=-1)


def reconstruct(denoiser: MlpParams, x_i, i):
    """Clean-window estimate from the noisy window at step i (same shape as x_i)."""
    out, _ = mlp_forward(denoiser, model_input(x_i, i, denoiser))
    if out.shape != np.shape(x_i):
        raise DimensionError(f"denoiser output {out.shape} does not match window {np.shape(x_i)}")
    return out


def posterior_mean(x_i, x0_hat, schedule: DiffusionSchedule, i):
    """Mean of q(x_{i-1} | x_i, x0_hat)."""
    if np.any(np.asarray(i) < 1):
        raise IndexError("posterior mean is undefined at step 0")
    i = _check_step(schedule, i)
    x_i = np.asarray(x_i, dtype=np.float64)
    c_x, c_x0 = schedule.posterior_coefficients(i)
    return _column(c_x, x_i) * x_i + _column(c_x0, x_i) * np.asarray(x0_hat, dtype=np.float64)


def apply_condition(x, s_t):
    """Overwrite the first state slot of each flattened window with the observation."""
    x = np.array(x, dtype=np.float64, copy=True)
    s_t = np.asarray(s_t, dtype=np.float64)
    sd = s_t.shape[-1]
    if sd > x.shape[-1]:
        raise DimensionError(f"state of width {sd} does not fit window of width {x.shape[-1]}")
    if s_t.ndim > 1 and s_t.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"observation batch {s_t.shape[:-1]} != window batch {x.shape[:-1]}")
    x[..., :sd] = s_t
    return x


def denoise_step(x_i, i: int, denoiser: MlpParams, schedule: DiffusionSchedule,
                 rng: np.random.Generator | None = None, guide: MlpParams | None = None,
                 rho: float = 0.0, noise=None, condition=None):
    """One reverse step: x_{i-1} = mu + rho * grad J(x_i, i) + sqrt(beta_i) * eps.

    eps is drawn from `rng` unless `noise` is given, and is forced to zero at
    i == 1. When `condition` is given it is re-imposed on the result.
    """
    from .guide import input_gradient

    if i < 1:
        raise IndexError("denoise_step needs i >= 1")
    _check_step(schedule, i)
    x_i = np.asarray(x_i, dtype=np.float64)
    x0_hat = reconstruct(denoiser, x_i, i)
    mean = posterior_mean(x_i, x0_hat, schedule, i)
    if guide is not None and rho != 0.0:
        grad = input_gradient(guide, x_i, i)
        mean = mean + rho * grad
    if i == 1:
        out = mean
    else:
        if noise is None:
            noise = rng.standard_normal(x_i.shape)
        out = mean + np.sqrt(schedule.beta[i]) * np.asarray(noise, dtype=np.float64)
    if condition is not None:
        out = apply_condition(out, condition)
    return check_finite(out, f"denoise step {i}")


def sample_chain(denoiser: MlpParams, schedule: DiffusionSchedule, shape, rng: np.random.Generator,
                 guide: MlpParams | None = None, rho: float = 0.0, condition=None):
    """Full N-step reverse chain from unit Gaussian noise."""
    x = rng.standard_normal(shape)
    if condition is not None:
        x = apply_condition(x, condition)
    for i in range(schedule.n_steps, 0, -1):
        x = denoise_step(x, i, denoiser, schedule, rng, guide=guide, rho=rho, condition=condition)
    return x
