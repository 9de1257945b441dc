"""Noise schedules, forward noising, the reverse step and sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_noise",
    "denoise_step",
    "sample",
    "SampleResult",
    "gaussian_mixture",
    "blob_images",
    "DEFAULT_MODES",
]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    eta: float

    @property
    def T(self) -> int:
        return self.alpha.size

    @classmethod
    def from_betas(cls, betas, eta: float = 1.0) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in [0, 1)")
        if eta < 0:
            raise ValueError("eta must be non-negative")
        alpha = 1.0 - betas
        alpha_bar = np.cumprod(alpha)
        one_minus_ab = 1.0 - alpha_bar
        # zero noise level (all betas 0 so far) makes the numerator vanish too
        safe = np.where(one_minus_ab > 0, one_minus_ab, 1.0)
        gamma = np.where(one_minus_ab > 0, (1.0 / np.sqrt(alpha)) * ((1.0 - alpha) / np.sqrt(safe)), 0.0)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.where(
            one_minus_ab > 0,
            eta * np.sqrt((1.0 - prev) / safe) * np.sqrt(betas),
            0.0,
        )
        sigma[0] = 0.0
        for arr in (betas, alpha, alpha_bar, sigma, gamma):
            arr.setflags(write=False)
        return cls(betas, alpha, alpha_bar, sigma, gamma, float(eta))

    def check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr >= self.T):
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return t_arr


def make_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2, eta: float = 1.0):
    """Linear-beta schedule with DDIM-style ``eta`` stochasticity."""
    if T < 1:
        raise ValueError("T must be positive")
    if not 0 <= beta_start <= beta_end < 1:
        raise ValueError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T), eta)


def _per_row(values: np.ndarray, t, x: np.ndarray) -> np.ndarray:
    v = values[np.asarray(t)]
    if np.ndim(v) == 0:
        return v
    return v.reshape((-1,) + (1,) * (x.ndim - 1))


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may vary per row."""
    schedule.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = _per_row(schedule.alpha_bar, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def denoise_step(x_t, eps_pred, t, schedule: NoiseSchedule, delta=None) -> np.ndarray:
    """One reverse step from ``x_t`` to ``x_{t-1}``.

    ``delta`` is the fresh Gaussian noise; it is ignored when ``sigma_t`` is 0
    (always the case at ``t == 0``).
    """
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    a = _per_row(schedule.alpha, t, x_t)
    ab = _per_row(schedule.alpha_bar, t, x_t)
    denom = np.sqrt(np.where(1.0 - ab > 0, 1.0 - ab, 1.0))
    coef = np.where(1.0 - ab > 0, (1.0 - a) / denom, 0.0)
    out = (1.0 / np.sqrt(a)) * (x_t - coef * np.asarray(eps_pred, dtype=np.float64))
    sig = _per_row(schedule.sigma, t, x_t)
    if delta is not None and np.any(sig != 0):
        out = out + sig * np.asarray(delta, dtype=np.float64)
    return out


@dataclass
class SampleResult:
    samples: np.ndarray
    # (T + 1, n, dim): entry t + 1 is the input to step t, entry 0 the final sample
    trajectory: np.ndarray | None = None


def sample(
    predict: Callable[[np.ndarray, int], np.ndarray],
    schedule: NoiseSchedule,
    n_samples: int | None = None,
    seed: int | np.random.Generator = 0,
    dim: int | None = None,
    x_T: np.ndarray | None = None,
    keep_trajectory: bool = False,
) -> SampleResult:
    """Run ``t = T-1 ... 0`` reverse steps with ``predict(x, t)`` as noise model.

    Noise is drawn from one stream: ``x_T`` first (unless given), then one
    ``delta`` per step whether or not ``sigma_t`` is zero, so two runs with
    the same seed share every noise draw.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if x_T is None:
        if n_samples is None or dim is None:
            raise ValueError("either x_T or both n_samples and dim are required")
        x_T = rng.standard_normal((n_samples, dim))
    x = np.array(x_T, dtype=np.float64)
    traj = None
    if keep_trajectory:
        traj = np.empty((schedule.T + 1,) + x.shape)
        traj[schedule.T] = x
    for t in range(schedule.T - 1, -1, -1):
        delta = rng.standard_normal(x.shape)
        x = denoise_step(x, predict(x, t), t, schedule, delta)
        if traj is not None:
            traj[t] = x
    return SampleResult(x, traj)


DEFAULT_MODES = np.array([[-1.5, -1.0], [1.5, 1.0]])


def gaussian_mixture(n: int, rng: np.random.Generator, modes=DEFAULT_MODES, std: float = 0.2):
    """Equal-weight isotropic Gaussian mixture around ``modes``."""
    modes = np.asarray(modes, dtype=np.float64)
    which = rng.integers(0, len(modes), size=n)
    return modes[which] + std * rng.standard_normal((n, modes.shape[1]))


def blob_images(n: int, rng: np.random.Generator, size: int = 8, std: float = 1.5):
    """Flattened ``size x size`` images holding one Gaussian blob each, values in [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centers = rng.uniform(1.5, size - 2.5, size=(n, 2))
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    img = np.exp(-d2 / (2 * std**2))
    return (2.0 * img - 1.0).reshape(n, size * size)
