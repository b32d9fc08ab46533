"""Closed-form diffused Gaussian mixtures used as an exact denoiser backend."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ContractError
from .scenes import Prompt
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ClassSpec:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variance: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ConfigError("a class needs at least one mixture component")
        if m.ndim != 2 or m.shape[0] != w.size:
            raise ConfigError(f"means must be (K, D) with K={w.size}, got {m.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be nonnegative and sum to 1")
        if not self.variance > 0:
            raise ConfigError("variance must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variance", float(self.variance))


@dataclass(frozen=True)
class GmmTask:
    classes: tuple
    shape: tuple  # (H, W, C) of every sample

    def __post_init__(self):
        classes = tuple(self.classes)
        if not classes:
            raise ConfigError("a task needs at least one class")
        D = int(np.prod(self.shape))
        for c in classes:
            if c.means.shape[1] != D:
                raise ConfigError(f"means have dimension {c.means.shape[1]}, shape implies {D}")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def components(self, class_id: Optional[int]):
        """(weights, means, variances) for one class, or the class-uniform mixture for ``None``."""
        if class_id is None:
            n = len(self.classes)
            w = np.concatenate([c.weights / n for c in self.classes])
            m = np.concatenate([c.means for c in self.classes])
            v = np.concatenate([np.full(c.weights.size, c.variance) for c in self.classes])
            return w, m, v
        c = self._spec(class_id)
        return c.weights, c.means, np.full(c.weights.size, c.variance)

    def _spec(self, class_id: int) -> ClassSpec:
        if not isinstance(class_id, (int, np.integer)) or not 0 <= class_id < len(self.classes):
            raise LookupError(f"class_id {class_id!r} not in task with {len(self.classes)} classes")
        return self.classes[class_id]

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "classes": [
                {"weights": c.weights.tolist(), "means": c.means.tolist(), "variance": c.variance}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GmmTask":
        try:
            classes = [ClassSpec(c["weights"], c["means"], c["variance"]) for c in doc["classes"]]
            return cls(tuple(classes), tuple(doc["shape"]))
        except KeyError as exc:
            raise ConfigError(f"GMM task document missing field {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GmmTask":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_task(seed: int = 0, shape=(4, 4, 3), n_classes: int = 2, k: int = 2,
                   variance: float = 0.05, balanced: bool = True) -> GmmTask:
    """The small mixture the round-trip and guidance checks run on.

    ``balanced=False`` draws Dirichlet component weights instead of equal
    ones. Samples from a light component can then be captured by a heavy
    neighbour during a coarse (T=50) probability-flow reconstruction.
    """
    rng = np.random.default_rng(seed)
    D = int(np.prod(shape))
    classes = []
    for _ in range(n_classes):
        means = rng.choice([-0.5, 0.5], size=(k, D)) + rng.normal(0.0, 0.1, size=(k, D))
        weights = rng.dirichlet(np.full(k, 4.0))
        if balanced:
            weights = np.full(k, 1.0 / k)
        weights /= weights.sum()
        classes.append(ClassSpec(weights, means, variance))
    return GmmTask(tuple(classes), tuple(shape))


def sample_x0(task: GmmTask, class_id: int, rng_seed: int) -> np.ndarray:
    spec = task._spec(class_id)
    rng = np.random.default_rng(rng_seed)
    j = rng.choice(spec.weights.size, p=spec.weights)
    x = spec.means[j] + math.sqrt(spec.variance) * rng.standard_normal(task.dim)
    return x.reshape(task.shape)


def _diffused(task, class_id, x_t, t, s):
    x = np.asarray(x_t, dtype=np.float64).reshape(-1)
    if x.size != task.dim:
        raise ContractError(f"x_t has {x.size} entries, task dimension is {task.dim}")
    w, m, v = task.components(class_id)
    a = s[t]
    var_t = a * v + (1.0 - a)  # (K,)
    diff = x[None, :] - math.sqrt(a) * m  # (K, D)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    log_comp = log_w - 0.5 * task.dim * np.log(2 * np.pi * var_t) - 0.5 * (diff**2).sum(1) / var_t
    return x, a, w, m, v, var_t, diff, log_comp


def marginal_logpdf(task: GmmTask, class_id, x_t, t: int, s: NoiseSchedule) -> float:
    *_, log_comp = _diffused(task, class_id, x_t, t, s)
    return float(logsumexp(log_comp))


def _responsibilities(log_comp):
    return np.exp(log_comp - logsumexp(log_comp))


def marginal_score(task: GmmTask, class_id, x_t, t: int, s: NoiseSchedule) -> np.ndarray:
    x, a, w, m, v, var_t, diff, log_comp = _diffused(task, class_id, x_t, t, s)
    r = _responsibilities(log_comp)
    score = -(r[:, None] * diff / var_t[:, None]).sum(0)
    return score.reshape(np.shape(x_t))


def eps_hat(task: GmmTask, class_id, x_t, t: int, s: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction ``-sqrt(1 - a_t) * score``; zeros at t=0."""
    if t == 0 or s[t] >= 1.0:
        return np.zeros(np.shape(x_t))
    return -math.sqrt(1.0 - s[t]) * marginal_score(task, class_id, x_t, t, s)


def posterior_mean_x0(task: GmmTask, class_id, x_t, t: int, s: NoiseSchedule) -> np.ndarray:
    x, a, w, m, v, var_t, diff, log_comp = _diffused(task, class_id, x_t, t, s)
    r = _responsibilities(log_comp)
    # per-component conjugate update of x_0 | x_t
    comp_mean = m + (v * math.sqrt(a) / var_t)[:, None] * diff
    return (r[:, None] * comp_mean).sum(0).reshape(np.shape(x_t))


class GmmDenoiser:
    """Denoiser backend whose prompts select a class.

    ``prompt_classes`` maps a prompt's token tuple to a class id. Prompts
    not in the map fall back to ``tokens[k] - 1``; the all-NULL prompt
    selects the class-uniform mixture, which is the unconditional density.
    """

    supports_attention = False

    def __init__(self, task: GmmTask, schedule: NoiseSchedule,
                 prompt_classes: Optional[Mapping[tuple, int]] = None):
        self.task = task
        self.schedule = schedule
        self.prompt_classes = dict(prompt_classes or {})
        self.calls = 0

    def class_of(self, prompt: Prompt) -> Optional[int]:
        if prompt.is_null():
            return None
        if prompt.tokens in self.prompt_classes:
            return self.prompt_classes[prompt.tokens]
        return prompt.tokens[prompt.k] - 1

    def __call__(self, x_t, t, prompt, record=False, cross_override=None):
        self.calls += 1
        return eps_hat(self.task, self.class_of(prompt), x_t, t, self.schedule), None


def class_prompt(class_id: int) -> Prompt:
    """The single-token prompt the default mapping sends to ``class_id``."""
    return Prompt((class_id + 1,), 0)
