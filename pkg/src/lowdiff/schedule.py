"""Noise levels: Karras sigma ladders, training-noise draws, loss weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SigmaSchedule:
    sigmas: np.ndarray  # descending, terminal 0
    sigma_min: float
    sigma_max: float
    rho: float = 7.0

    def __len__(self) -> int:
        return len(self.sigmas)

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


@dataclass(frozen=True)
class LossWeightConfig:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.p_std <= 0:
            raise ValueError(f"p_std must be positive, got {self.p_std}")


def karras_sigmas(n: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> SigmaSchedule:
    """``n`` noise levels spaced uniformly in ``sigma**(1/rho)``, then 0."""
    if n < 2:
        raise ValueError(f"karras_sigmas needs n >= 2, got {n}")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})")
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    sig = (hi + ramp * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    return SigmaSchedule(np.append(sig, 0.0), float(sigma_min), float(sigma_max), float(rho))


def sample_training_sigma(rng: np.random.Generator, cfg: LossWeightConfig = LossWeightConfig(), size=None):
    """Log-normal noise level ``exp(p_mean + p_std * z)``."""
    z = rng.standard_normal(size)
    return np.exp(cfg.p_mean + cfg.p_std * z)


def loss_weight(sigma, cfg: LossWeightConfig = LossWeightConfig()):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("loss_weight requires sigma > 0")
    sd = cfg.sigma_data
    w = (sigma**2 + sd**2) / (sigma * sd) ** 2
    return float(w) if w.ndim == 0 else w


def perturb(x0: np.ndarray, sigma, rng: np.random.Generator):
    """Return ``(x0 + sigma * eps, eps)`` with fresh standard-normal ``eps``.

    ``sigma`` may be a scalar or a per-sample vector over the leading axis.
    """
    x0 = np.asarray(x0)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("perturb requires sigma >= 0")
    eps = rng.standard_normal(x0.shape).astype(x0.dtype, copy=False)
    if sigma.ndim == 0:
        if sigma == 0:
            return x0.copy(), eps
        s = sigma.astype(x0.dtype)
    else:
        s = sigma.astype(x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
    return x0 + s * eps, eps


def edm_precond(sigma, sigma_data: float = 0.5):
    """EDM preconditioning coefficients ``(c_skip, c_out, c_in, c_noise)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sd2 = sigma_data**2
    c_skip = sd2 / (sigma**2 + sd2)
    c_out = sigma * sigma_data / np.sqrt(sigma**2 + sd2)
    c_in = 1.0 / np.sqrt(sigma**2 + sd2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise
