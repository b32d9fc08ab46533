"""Attention-derived content/background masks and the guidance precision."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .denoiser import AttentionRecord
from .errors import ConfigError, ContractError

DEFAULT_DELTA = 1.5


@dataclass
class AttentionSummary:
    cross_avg: np.ndarray  # (L, H, W)
    self_avg: np.ndarray  # (H*W, H*W)


@dataclass
class MaskBundle:
    content: np.ndarray  # (H, W)
    background: np.ndarray  # (H, W), exactly 1 - content
    lambda_pre: float
    delta: float = DEFAULT_DELTA

    @classmethod
    def from_content(cls, content, lambda_pre: float, delta: float = DEFAULT_DELTA) -> "MaskBundle":
        content = np.asarray(content, dtype=np.float64)
        return cls(content, background_mask(content), float(lambda_pre), float(delta))

    @classmethod
    def from_background(cls, background, lambda_pre: float, delta: float = DEFAULT_DELTA) -> "MaskBundle":
        """For externally supplied preservation masks (backends without attention)."""
        background = np.asarray(background, dtype=np.float64)
        return cls(1.0 - background, background, float(lambda_pre), float(delta))


def accumulate_attention(records: Sequence[AttentionRecord]) -> AttentionSummary:
    """Arithmetic mean of the recorded maps over timesteps."""
    if not records:
        raise ContractError("cannot average an empty sequence of attention records")
    cross = np.zeros_like(records[0].cross, dtype=np.float64)
    selfa = np.zeros_like(records[0].self_attn, dtype=np.float64)
    for r in records:
        if r.cross.shape != cross.shape or r.self_attn.shape != selfa.shape:
            raise ContractError("attention records have inconsistent shapes")
        cross += r.cross
        selfa += r.self_attn
    return AttentionSummary(cross / len(records), selfa / len(records))


def regularize_mask(summary: AttentionSummary, k: int) -> np.ndarray:
    """Self-attention smoothing of the token-``k`` cross map.

    Entry (h, w) is the Frobenius inner product of pixel (h, w)'s
    self-attention slice (reshaped H x W) with ``cross_avg[k]``.
    """
    L, h, w = summary.cross_avg.shape
    if not 0 <= k < L:
        raise ContractError(f"token index {k} outside prompt of length {L}")
    return (summary.self_avg @ summary.cross_avg[k].reshape(-1)).reshape(h, w)


def background_mask(content: np.ndarray) -> np.ndarray:
    content = np.asarray(content, dtype=np.float64)
    if np.any(content < 0.0) or np.any(content > 1.0):
        raise ContractError("content mask values must lie in [0, 1]")
    return 1.0 - content


def schedule_threshold(t: int, T: int, delta: float = DEFAULT_DELTA) -> float:
    return 1.0 - math.cos(math.pi * (T - t) / (T * delta))


def binary_schedule(P: np.ndarray, t: int, T: int, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Pixels anchored to the source at step ``t``: ``P >= 1 - cos(pi (T - t) / (T delta))``."""
    if not delta > 0:
        raise ConfigError("delta must be positive")
    if not 0 <= t <= T:
        raise ContractError(f"t={t} outside 0..{T}")
    return np.asarray(P) >= schedule_threshold(t, T, delta)


def precision_diag(P: np.ndarray, B_t: np.ndarray, lambda_pre: float) -> np.ndarray:
    """Row-major diagonal ``lambda_pre * vec(B_t * P)``, shared by all channels."""
    if lambda_pre < 0:
        raise ConfigError("lambda_pre must be nonnegative")
    return lambda_pre * (np.asarray(B_t, dtype=np.float64) * np.asarray(P, dtype=np.float64)).reshape(-1)
