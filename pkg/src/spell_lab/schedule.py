"""Variance-preserving SDE coefficients and the backward time grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta variance-preserving schedule.

    ``beta(t) = beta_min + t * (beta_max - beta_min)`` and the forward marginal is
    ``X_t = alpha_t X_0 + sigma_t eps`` with ``alpha_t**2 + sigma_t**2 == 1``.
    Times below ``t_min`` are clamped wherever sigma ends up in a denominator.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max >= self.beta_min):
            raise ValueError(
                f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}"
            )
        if not 0.0 < self.t_min < 1.0:
            raise ValueError(f"t_min must lie in (0, 1), got {self.t_min}")

    def beta(self, t: float) -> float:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def integrated_beta(self, t: float) -> float:
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0 or math.isnan(t):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return t


def alpha_sigma(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    """Return ``(alpha_t, sigma_t)``.

    Both are evaluated at ``max(t, t_min)`` so the pair stays on the unit circle;
    ``t == 0`` exactly returns ``(1, 0)``, the data distribution itself.
    """
    t = _check_time(t)
    if t == 0.0:
        return 1.0, 0.0
    log_alpha = -0.5 * schedule.integrated_beta(max(t, schedule.t_min))
    # sigma^2 = 1 - alpha^2 via expm1 keeps precision for small t
    return math.exp(log_alpha), math.sqrt(-math.expm1(2.0 * log_alpha))


def drift_diffusion(schedule: NoiseSchedule, t: float, x) -> tuple[np.ndarray, float]:
    """Forward drift ``f(t, x) = -beta(t) x / 2`` and diffusion scale ``g(t)``."""
    t = _check_time(t)
    beta = schedule.beta(t)
    return -0.5 * beta * np.asarray(x, dtype=float), math.sqrt(beta)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform descending grid ``1 = t_0 > t_1 > ... > t_N = 0``."""

    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def times(self) -> np.ndarray:
        return 1.0 - np.arange(self.n_steps + 1) / self.n_steps

    @property
    def step_size(self) -> float:
        return 1.0 / self.n_steps

    def __len__(self) -> int:
        return self.n_steps
