"""Pixel-space editing metrics and the shape classifier behind the alignment score."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .scenes import SHAPE_CLASSES, H, W, C, iter_scenes

DISTANCE_KINDS = ("pixel_l2", "gradmap_l2")


def gradient_magnitude(x: np.ndarray) -> np.ndarray:
    """Per-channel magnitude of forward differences; the last row/column differences are zero."""
    x = np.asarray(x, dtype=np.float64)
    dy = np.zeros_like(x)
    dx = np.zeros_like(x)
    dy[:-1] = x[1:] - x[:-1]
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    return np.sqrt(dy**2 + dx**2)


def _pair_distance(a, b, kind: str) -> float:
    if kind == "pixel_l2":
        return float(np.mean((a - b) ** 2))
    if kind == "gradmap_l2":
        return float(np.mean((gradient_magnitude(a) - gradient_magnitude(b)) ** 2))
    raise ConfigError(f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}")


def distance_matrix(images: Sequence[np.ndarray], kind: str = "pixel_l2") -> np.ndarray:
    """Symmetric zero-diagonal matrix of pairwise image distances."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 2:
        raise ContractError("a distance matrix needs at least two images")
    if any(im.shape != images[0].shape for im in images):
        raise ContractError("all images must share one shape")
    n = len(images)
    G = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            G[i, j] = G[j, i] = _pair_distance(images[i], images[j], kind)
    return G


def relational_distance(G_src: np.ndarray, G_tgt: np.ndarray) -> tuple[float, float]:
    """``min_g (1/n) ||G_tgt - g G_src||_F^2`` and its minimiser.

    A zero source matrix leaves the scale unidentified; the minimiser is
    then reported as 0.
    """
    G_src, G_tgt = np.asarray(G_src, dtype=np.float64), np.asarray(G_tgt, dtype=np.float64)
    if G_src.shape != G_tgt.shape or G_src.ndim != 2 or G_src.shape[0] != G_src.shape[1]:
        raise ContractError(f"distance matrices must be square and equal in size: {G_src.shape}, {G_tgt.shape}")
    n = G_src.shape[0]
    denom = float(np.sum(G_src * G_src))
    g = 0.0 if denom == 0.0 else float(np.sum(G_src * G_tgt)) / denom
    rd = float(np.sum((G_tgt - g * G_src) ** 2)) / n
    return rd, g


def bg_distance(x_src, x_tgt, bg_mask) -> float:
    """Mean squared difference over background pixels and all channels."""
    x_src, x_tgt, bg_mask = np.asarray(x_src), np.asarray(x_tgt), np.asarray(bg_mask, dtype=bool)
    if bg_mask.shape != x_src.shape[:2] or x_src.shape != x_tgt.shape:
        raise ContractError("mask and image shapes disagree")
    if not bg_mask.any():
        raise ContractError("background mask is empty")
    return float(np.mean((x_src[bg_mask] - x_tgt[bg_mask]) ** 2))


def structure_distance(x_src, x_tgt) -> float:
    """Gradient-magnitude MSE; blind to global brightness shifts."""
    x_src, x_tgt = np.asarray(x_src), np.asarray(x_tgt)
    if x_src.shape != x_tgt.shape:
        raise ContractError("images differ in shape")
    return _pair_distance(x_src, x_tgt, "gradmap_l2")


# ---------------------------------------------------------------- classifier


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ShapeClassifier:
    """One hidden ReLU layer of 64 units over flattened pixels."""

    w1: np.ndarray = None
    b1: np.ndarray = None
    w2: np.ndarray = None
    b2: np.ndarray = None
    trained: bool = False
    val_accuracy: float = float("nan")
    classes: tuple = SHAPE_CLASSES

    def predict_proba(self, images) -> np.ndarray:
        if not self.trained:
            raise ConfigError("the shape classifier has not been trained")
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        x = x.reshape(1 if single else x.shape[0], -1)
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        p = _softmax(h @ self.w2 + self.b2)
        return p[0] if single else p

    def save(self, path) -> None:
        np.savez(path, w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2,
                 val_accuracy=self.val_accuracy, classes=np.array(self.classes))

    @classmethod
    def load(cls, path) -> "ShapeClassifier":
        if not Path(path).exists():
            raise ConfigError(f"classifier file {path} does not exist")
        with np.load(path) as z:
            return cls(z["w1"], z["b1"], z["w2"], z["b2"], True, float(z["val_accuracy"]),
                       tuple(str(c) for c in z["classes"]))


def train_classifier(n_scenes: int = 3000, seed: int = 0, epochs: int = 30, hidden: int = 64,
                     lr: float = 1e-3, batch_size: int = 64, outlier_fraction: float = 0.25) -> ShapeClassifier:
    """Fit on freshly generated scenes.

    A share of each batch is uniform noise with a uniform target
    distribution, which keeps the classifier unconfident off the data.
    """
    images, labels, splits = [], [], []
    for _, split, scene in iter_scenes(n_scenes, seed=seed):
        images.append(scene.image.reshape(-1))
        labels.append(SHAPE_CLASSES.index(scene.meta["shape_class"]))
        splits.append(split)
    X, y, splits = np.stack(images), np.asarray(labels), np.asarray(splits)
    Xtr, ytr = X[splits == "train"], y[splits == "train"]
    Xva, yva = X[splits == "val"], y[splits == "val"]
    n_cls, D = len(SHAPE_CLASSES), X.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    a1, a2 = np.sqrt(6.0 / (D + hidden)), np.sqrt(6.0 / (hidden + n_cls))
    params = {
        "w1": rng.uniform(-a1, a1, (D, hidden)), "b1": np.zeros(hidden),
        "w2": rng.uniform(-a2, a2, (hidden, n_cls)), "b2": np.zeros(n_cls),
    }
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    n_out = int(round(batch_size * outlier_fraction))
    for _ in range(epochs):
        order = rng.permutation(len(Xtr))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            xb = np.concatenate([Xtr[idx], rng.uniform(-1.0, 1.0, (n_out, D))])
            target = np.concatenate([np.eye(n_cls)[ytr[idx]], np.full((n_out, n_cls), 1.0 / n_cls)])
            z1 = xb @ params["w1"] + params["b1"]
            h = np.maximum(z1, 0.0)
            p = _softmax(h @ params["w2"] + params["b2"])
            g_logits = (p - target) / len(xb)
            g_h = g_logits @ params["w2"].T * (z1 > 0)
            grads = {"w2": h.T @ g_logits, "b2": g_logits.sum(0), "w1": xb.T @ g_h, "b1": g_h.sum(0)}
            step += 1
            for k in params:
                m[k] = 0.9 * m[k] + 0.1 * grads[k]
                v[k] = 0.999 * v[k] + 0.001 * grads[k] ** 2
                params[k] -= lr * (m[k] / (1 - 0.9**step)) / (np.sqrt(v[k] / (1 - 0.999**step)) + 1e-8)
    clf = ShapeClassifier(**params, trained=True)
    clf.val_accuracy = float(np.mean(clf.predict_proba(Xva.reshape(-1, H, W, C)).argmax(1) == yva))
    return clf


def alignment_score(x_tgt, target_shape_class: str, classifier: ShapeClassifier) -> float:
    """Classifier probability of the target shape class."""
    if classifier is None or not classifier.trained:
        raise ConfigError("alignment needs a trained classifier")
    if target_shape_class not in classifier.classes:
        raise ConfigError(f"unknown shape class {target_shape_class!r}")
    return float(classifier.predict_proba(x_tgt)[classifier.classes.index(target_shape_class)])
