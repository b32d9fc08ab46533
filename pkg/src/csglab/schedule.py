"""Noise schedules and the deterministic DDIM steps.

Index convention: ``t`` runs over ``0..T`` and ``alpha[0] == 1`` is the data.
Latents are numpy arrays of shape ``(H, W, C)``; every operation here is
elementwise, so any shape works as long as ``x`` and ``eps`` agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .errors import ConfigError, ContractError, DomainError, StepRangeError

SCHEDULE_KINDS = ("linear_alpha", "cosine_alpha")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.T < 1 or alpha.shape != (self.T + 1,):
            raise ConfigError(f"alpha must have T+1={self.T + 1} entries, got {alpha.shape}")
        if alpha[0] != 1.0 or not alpha[-1] > 0.0:
            raise ConfigError("alpha must start at exactly 1 and end above 0")
        if not np.all(np.diff(alpha) < 0):
            raise ConfigError("alpha must be strictly decreasing")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    def __getitem__(self, t: int) -> float:
        return float(self.alpha[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha_T": float(self.alpha[-1]), "kind": self.kind}


def make_schedule(T: int, alpha_T: float, kind: str = "cosine_alpha") -> NoiseSchedule:
    """Build a strictly decreasing alpha sequence from 1 down to ``alpha_T``.

    ``linear_alpha`` interpolates alpha linearly in t; ``cosine_alpha`` uses
    ``alpha_T + (1 - alpha_T) * cos^2(pi t / 2T)``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < alpha_T < 1.0:
        raise ConfigError(f"alpha_T must lie in (0, 1), got {alpha_T!r}")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "linear_alpha":
        alpha = 1.0 - (1.0 - alpha_T) * t / T
    elif kind == "cosine_alpha":
        alpha = alpha_T + (1.0 - alpha_T) * np.cos(np.pi * t / (2 * T)) ** 2
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    # pin the endpoints against rounding in the closed forms
    alpha[0] = 1.0
    alpha[-1] = alpha_T
    return NoiseSchedule(int(T), alpha, kind)


def gamma(s: NoiseSchedule, t: int) -> float:
    """Coefficient of the score in the rewritten reverse step."""
    if not 1 <= t <= s.T:
        raise DomainError(f"gamma is defined for 1 <= t <= T, got t={t}")
    a_prev, a_t = s[t - 1], s[t]
    if a_t >= 1.0:
        raise DomainError("gamma requires alpha_t < 1")
    return math.sqrt(a_prev / a_t) - math.sqrt((1.0 - a_prev) / (1.0 - a_t))


def _check_shapes(x: np.ndarray, eps: np.ndarray) -> None:
    if np.shape(x) != np.shape(eps):
        raise ContractError(f"shape mismatch: x {np.shape(x)} vs eps {np.shape(eps)}")


def predict_x0(x_t: np.ndarray, eps: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    """Clean-image estimate ``(x_t - sqrt(1 - a_t) eps) / sqrt(a_t)``."""
    _check_shapes(x_t, eps)
    a_t = s[t]
    return (x_t - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)


def score_from_eps(eps: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    a_t = s[t]
    if a_t >= 1.0:
        raise DomainError("the score is undefined where alpha_t == 1")
    return -eps / math.sqrt(1.0 - a_t)


def invert_from_eps(x_t: np.ndarray, eps: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    """x_{t+1} given the noise prediction made at (x_t, t)."""
    if not 0 <= t <= s.T - 1:
        raise StepRangeError(f"inversion step needs 0 <= t <= T-1, got t={t}")
    a_next = s[t + 1]
    f = predict_x0(x_t, eps, s, t)
    return math.sqrt(a_next) * f + math.sqrt(1.0 - a_next) * eps


def reverse_from_eps(x_t: np.ndarray, eps: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    """x_{t-1} given the noise prediction made at (x_t, t)."""
    if not 1 <= t <= s.T:
        raise StepRangeError(f"reverse step needs 1 <= t <= T, got t={t}")
    a_prev = s[t - 1]
    f = predict_x0(x_t, eps, s, t)
    return math.sqrt(a_prev) * f + math.sqrt(1.0 - a_prev) * eps


def reverse_score_form(x_t: np.ndarray, eps: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    """Same step as :func:`reverse_from_eps`, written as a rescale plus a score term."""
    _check_shapes(x_t, eps)
    return math.sqrt(s[t - 1] / s[t]) * x_t - math.sqrt(1.0 - s[t]) * gamma(s, t) * eps


class Denoiser(Protocol):
    """Noise-prediction backend.

    ``cross_override`` (L, H, W) replaces the post-softmax cross-attention map
    before value mixing; backends without attention ignore it.
    """

    schedule: NoiseSchedule
    supports_attention: bool

    def __call__(self, x_t: np.ndarray, t: int, prompt, record: bool = False,
                 cross_override: Optional[np.ndarray] = None):
        ...


def ddim_invert_step(x_t, t, d: Denoiser, y, s: NoiseSchedule) -> np.ndarray:
    if not 0 <= t <= s.T - 1:
        raise StepRangeError(f"inversion step needs 0 <= t <= T-1, got t={t}")
    eps, _ = d(x_t, t, y)
    return invert_from_eps(x_t, eps, s, t)


def ddim_reverse_step(x_t, t, d: Denoiser, y, s: NoiseSchedule) -> np.ndarray:
    if not 1 <= t <= s.T:
        raise StepRangeError(f"reverse step needs 1 <= t <= T, got t={t}")
    eps, _ = d(x_t, t, y)
    return reverse_from_eps(x_t, eps, s, t)
