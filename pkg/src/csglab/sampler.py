"""Conditional score guidance: inversion cache, attention mixup and the guided reverse step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .denoiser import AttentionRecord
from .errors import ConfigError, ContractError, NumericalError
from .masks import (
    AttentionSummary,
    MaskBundle,
    accumulate_attention,
    binary_schedule,
    precision_diag,
    regularize_mask,
)
from .scenes import Prompt
from .schedule import NoiseSchedule, gamma, invert_from_eps, reverse_from_eps

SELF_ATTN_SOURCES = ("inversion", "reconstruction")
METHODS = ("csg", "csg_nomix", "ddim")


@dataclass
class GuidanceConfig:
    lambda_pre: float = 10.0
    delta: float = 1.5
    cfg_scale: float = 3.0
    mixup_enabled: bool = True
    steps: int = 50
    self_attn_source: str = "inversion"

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.lambda_pre < 0:
            raise ConfigError("lambda_pre must be nonnegative")
        if self.cfg_scale < 1:
            raise ConfigError("cfg_scale must be at least 1")
        if self.self_attn_source not in SELF_ATTN_SOURCES:
            raise ConfigError(f"self_attn_source must be one of {SELF_ATTN_SOURCES}")

    def for_method(self, method: str) -> "GuidanceConfig":
        """The ablation variants: full CSG, CSG without mixup, and plain DDIM."""
        if method == "csg":
            return self
        d = asdict(self)
        if method == "csg_nomix":
            d["mixup_enabled"] = False
        elif method == "ddim":
            d.update(mixup_enabled=False, lambda_pre=0.0)
        else:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        return GuidanceConfig(**d)


@dataclass
class TrajectoryCache:
    latents: list  # x_0 .. x_T of the source inversion
    src_attention: list  # one AttentionRecord per inversion step (empty without attention)
    summary: Optional[AttentionSummary]
    src_prompt: Prompt


class _CallCounter:
    def __init__(self, d):
        self.d = d
        self.calls = 0

    def __call__(self, *args, **kw):
        self.calls += 1
        return self.d(*args, **kw)


def _check_finite(x, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite latent {where}")


def invert_with_cache(x_src, y_src: Prompt, d, s: NoiseSchedule, cfg: GuidanceConfig) -> TrajectoryCache:
    """DDIM-invert the source image, keeping every latent and attention record."""
    if cfg.mixup_enabled and not getattr(d, "supports_attention", False):
        raise ConfigError("mixup needs a backend that records attention; disable mixup for this backend")
    record = bool(getattr(d, "supports_attention", False))
    x = np.asarray(x_src, dtype=np.float64)
    latents, records = [x], []
    for t in range(s.T):
        eps, attn = d(x, t, y_src, record=record)
        if record:
            records.append(attn)
        x = invert_from_eps(x, eps, s, t)
        _check_finite(x, f"during inversion at t={t + 1}")
        latents.append(x)
    summary = accumulate_attention(records) if records else None
    if record and cfg.self_attn_source == "reconstruction":
        summary = AttentionSummary(summary.cross_avg, _reconstruction_self_attention(latents[-1], y_src, d, s))
    return TrajectoryCache(latents, records, summary, y_src)


def _reconstruction_self_attention(x_T, y_src, d, s):
    x, maps = x_T, []
    for t in range(s.T, 0, -1):
        eps, attn = d(x, t, y_src, record=True)
        maps.append(attn)
        x = reverse_from_eps(x, eps, s, t)
    return accumulate_attention(maps).self_avg


def cfg_eps(d, x, t: int, y: Prompt, w: float, cross_override=None):
    """Classifier-free guidance ``eps(null) + w (eps(y) - eps(null))``.

    Returns the combined noise and the conditional call's attention record.
    With ``w == 1`` the unconditional call is skipped and ``eps(y)`` is
    returned unchanged.
    """
    if w < 1:
        raise ConfigError("cfg scale must be at least 1")
    record = bool(getattr(d, "supports_attention", False))
    eps_c, attn = d(x, t, y, record=record, cross_override=cross_override)
    if w == 1:
        return eps_c, attn
    eps_u, _ = d(x, t, y.null(), record=False)
    return eps_u + w * (eps_c - eps_u), attn


def mixup(M_src_t, M_tgt_t, P):
    """Per-token blend: source map where P says preserve, target map elsewhere."""
    M_src_t, M_tgt_t, P = np.asarray(M_src_t), np.asarray(M_tgt_t), np.asarray(P)
    if M_src_t.shape != M_tgt_t.shape or M_src_t.shape[1:] != P.shape:
        raise ContractError(f"mixup shapes disagree: {M_src_t.shape}, {M_tgt_t.shape}, {P.shape}")
    return M_src_t * P[None] + M_tgt_t * (1.0 - P)[None]


def guidance_term(x_tgt_t, x_src_t, omega_diag, s: NoiseSchedule = None, t: int = None):
    """``Omega_t (x_tgt - x_src)`` with the H*W diagonal applied to every channel."""
    x_tgt_t, x_src_t = np.asarray(x_tgt_t), np.asarray(x_src_t)
    if x_tgt_t.shape != x_src_t.shape:
        raise ContractError("target and source latents differ in shape")
    h, w, c = x_tgt_t.shape
    omega = np.asarray(omega_diag, dtype=np.float64)
    if omega.shape != (h * w,):
        raise ContractError(f"omega diagonal must have {h * w} entries, got {omega.shape}")
    return omega.reshape(h, w, 1) * (x_tgt_t - x_src_t)


def _source_cross(cache: TrajectoryCache, t: int):
    # inversion record i was taken at (x_i, i); nothing was recorded at x_T
    if not cache.src_attention:
        raise ContractError("cache holds no source attention maps")
    return cache.src_attention[min(t, len(cache.src_attention) - 1)].cross


def csg_reverse_step(x_tgt_t, t: int, cache: TrajectoryCache, masks: MaskBundle, y_tgt: Prompt,
                     d, s: NoiseSchedule, cfg: GuidanceConfig, step_log: Optional[list] = None):
    """One guided step x_t -> x_{t-1}."""
    if not 1 <= t <= s.T:
        raise ContractError(f"reverse step needs 1 <= t <= T, got t={t}")
    if t >= len(cache.latents):
        raise ContractError(f"cache has no source latent for t={t}")
    x_src_t = cache.latents[t]
    P = masks.background
    override = None
    if cfg.mixup_enabled:
        _, attn_tgt = d(x_tgt_t, t, y_tgt, record=True)
        override = mixup(_source_cross(cache, t), attn_tgt.cross, P)
    eps, _ = cfg_eps(d, x_tgt_t, t, y_tgt, cfg.cfg_scale, cross_override=override)
    base = reverse_from_eps(x_tgt_t, eps, s, t)
    B_t = binary_schedule(P, t, s.T, masks.delta)
    omega = precision_diag(P, B_t, masks.lambda_pre)
    g_t = gamma(s, t)
    pull = g_t * guidance_term(x_tgt_t, x_src_t, omega, s, t)
    if step_log is not None:
        step_log.append({
            "t": t,
            "alpha": s[t],
            "gamma": g_t,
            "guidance_l2": float(np.linalg.norm(pull)),
            "omega_active_fraction": float(np.mean(omega > 0)),
        })
    return base - pull


@dataclass
class EditReport:
    config: dict
    steps: list = field(default_factory=list)
    calls: dict = field(default_factory=dict)
    masks: Optional[MaskBundle] = None
    output_image: Optional[str] = None

    @property
    def guidance_norm(self) -> dict:
        return {row["t"]: row["guidance_l2"] for row in self.steps}

    def to_dict(self) -> dict:
        return {"config": self.config, "steps": self.steps, "calls": self.calls,
                "output_image": self.output_image}


def build_masks(cache: TrajectoryCache, k: int, cfg: GuidanceConfig) -> MaskBundle:
    content = regularize_mask(cache.summary, k)
    # keep the mask inside [0, 1] against rounding in the averaged maps
    return MaskBundle.from_content(np.clip(content, 0.0, 1.0), cfg.lambda_pre, cfg.delta)


def _check_prompts(y_src: Prompt, y_tgt: Prompt):
    if y_src.L != y_tgt.L or y_src.k != y_tgt.k:
        raise ConfigError("source and target prompts must share length and edited index")


def edit(x_src, y_src: Prompt, y_tgt: Prompt, d, s: NoiseSchedule, cfg: GuidanceConfig,
         masks: Optional[MaskBundle] = None, cache: Optional[TrajectoryCache] = None):
    """Translate ``x_src`` from ``y_src`` to ``y_tgt``.

    ``masks`` overrides the attention-derived background mask (needed for
    backends without attention when guidance is on). Returns
    ``(x_tgt, report)``.
    """
    _check_prompts(y_src, y_tgt)
    if cfg.steps != s.T:
        raise ConfigError(f"guidance steps {cfg.steps} disagree with schedule T={s.T}")
    counter = _CallCounter(d)
    counter.supports_attention = getattr(d, "supports_attention", False)
    if cache is None:
        cache = invert_with_cache(x_src, y_src, counter, s, cfg)
    inversion_calls = counter.calls
    if masks is None:
        if cache.summary is not None:
            masks = build_masks(cache, y_src.k, cfg)
        elif cfg.lambda_pre == 0:
            shape = np.shape(x_src)[:2]
            masks = MaskBundle.from_content(np.zeros(shape), 0.0, cfg.delta)
        else:
            raise ConfigError("guidance needs a background mask; this backend records no attention")
    else:
        masks = MaskBundle(masks.content, masks.background, cfg.lambda_pre, cfg.delta)
    report = EditReport(config=asdict(cfg), masks=masks)
    x = cache.latents[-1]
    for t in range(s.T, 0, -1):
        x = csg_reverse_step(x, t, cache, masks, y_tgt, counter, s, cfg, report.steps)
        _check_finite(x, f"at reverse step t={t}")
    report.calls = {"inversion": inversion_calls, "generation": counter.calls - inversion_calls}
    return x, report


def ddim_translate(x_src, y_src: Prompt, y_tgt: Prompt, d, s: NoiseSchedule, w: float = 1.0,
                   cache: Optional[TrajectoryCache] = None):
    """Naive translation: invert under ``y_src``, regenerate under ``y_tgt`` with CFG."""
    if cache is None:
        x = np.asarray(x_src, dtype=np.float64)
        for t in range(s.T):
            eps, _ = d(x, t, y_src)
            x = invert_from_eps(x, eps, s, t)
    else:
        x = cache.latents[-1]
    for t in range(s.T, 0, -1):
        eps, _ = cfg_eps(d, x, t, y_tgt, w)
        x = reverse_from_eps(x, eps, s, t)
    return x
