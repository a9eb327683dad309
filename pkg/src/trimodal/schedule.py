"""Cosine masking schedule and the timestep machinery around it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

HALF_PI = 0.5 * math.pi
T_MIN = 1e-3


def _check_unit(t: float, name: str = "t") -> None:
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"{name}={t} outside [0, 1]")


def alpha(t: float) -> float:
    """Probability that a token is still unmasked at time ``t``."""
    _check_unit(t)
    if t == 1.0:
        return 0.0
    return max(math.cos(HALF_PI * t), 0.0)


def mask_ratio(t: float) -> float:
    return 1.0 - alpha(t)


def alpha_derivative(t: float) -> float:
    _check_unit(t)
    return -HALF_PI * math.sin(HALF_PI * t)


def time_pdf(t: float) -> float:
    """Arccos sampling density over (0, 1]; integrates to one."""
    if not (0.0 < t <= 1.0):
        raise DomainError(f"t={t} outside (0, 1]")
    return (2.0 / math.pi) / math.sqrt(1.0 - (1.0 - t) ** 2)


def time_cdf(t: float) -> float:
    _check_unit(t)
    return 1.0 - (2.0 / math.pi) * math.asin(1.0 - t)


def sample_timestep(u: float) -> float:
    """Inverse-CDF map from a uniform draw to a timestep."""
    _check_unit(u, "u")
    if u == 1.0:
        return 1.0
    return max(1.0 - math.sin(HALF_PI * (1.0 - u)), 0.0)


def loss_weight(t: float) -> float:
    """NELBO weight -alpha'(t) / (1 - alpha(t))."""
    if not (0.0 < t <= 1.0):
        raise DomainError(f"t={t} outside (0, 1]")
    return HALF_PI * math.sin(HALF_PI * t) / (1.0 - math.cos(HALF_PI * t))


def sample_training_time(rng: np.random.Generator, t_min: float = T_MIN) -> float:
    """One training timestep from the arccos density, clamped below at ``t_min``."""
    return max(sample_timestep(float(rng.random())), t_min)


@dataclass(frozen=True)
class NoiseSchedule:
    num_inference_steps: int = 12
    kind: str = "cosine"
    t_min: float = T_MIN

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be positive")

    def alpha(self, t: float) -> float:
        return alpha(t)

    def inference_times(self) -> list[float]:
        """Grid 1, (T-1)/T, ..., 1/T visited by the sampler."""
        T = self.num_inference_steps
        return [(T - i) / T for i in range(T)]
