"""A tiny epsilon-prediction network with one self- and one cross-attention block.

Pipeline per pixel (n = H*W pixels, width d = 32)::

    h0 = [x, pos] @ in_w + in_b + (time_feats @ time_w + time_b)
    h1 = h0 + softmax(q k^T / sqrt(d)) v @ self_o          # over n key pixels
    h2 = h1 + softmax(qc kc^T / sqrt(d)) vc                # over L prompt tokens
    eps = silu(h2 @ head_w1 + head_b1) @ head_w2 + head_b2

The backward pass is written by hand; :func:`gradient_check` compares it
with central differences.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, NumericalError
from .scenes import C as SCENE_C
from .scenes import H as SCENE_H
from .scenes import NULL_TOKEN, VOCAB_SIZE, W as SCENE_W
from .scenes import Dataset, Prompt
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

WIDTH = 32
N_FREQ = 8  # sin/cos pairs of t/T
POS_PERIODS = (32.0, 16.0, 8.0, 4.0)
POS_DIM = 4 * len(POS_PERIODS)

PARAM_SHAPES = {
    "token_embedding": (VOCAB_SIZE, WIDTH),
    "time_w": (2 * N_FREQ, WIDTH),
    "time_b": (WIDTH,),
    "in_w": (SCENE_C + POS_DIM, WIDTH),
    "in_b": (WIDTH,),
    "self_q": (WIDTH, WIDTH),
    "self_k": (WIDTH, WIDTH),
    "self_v": (WIDTH, WIDTH),
    "self_o": (WIDTH, WIDTH),
    "cross_q": (WIDTH, WIDTH),
    "cross_k": (WIDTH, WIDTH),
    "cross_v": (WIDTH, WIDTH),
    "head_w1": (WIDTH, WIDTH),
    "head_b1": (WIDTH,),
    "head_w2": (WIDTH, SCENE_C),
    "head_b2": (SCENE_C,),
}


@dataclass
class AttentionRecord:
    cross: np.ndarray  # (L, H, W), sums to 1 over L at every pixel
    self_attn: np.ndarray  # (H*W, H*W), rows sum to 1


def init_weights(seed: int, dtype=np.float32) -> dict:
    """Glorot-uniform matrices, zero biases, N(0, 0.02^2) token embeddings."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in PARAM_SHAPES.items():
        if name == "token_embedding":
            w = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 1:
            w = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            w = rng.uniform(-a, a, size=shape)
        weights[name] = w.astype(dtype)
    return weights


def cast_weights(weights: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype).copy() for k, v in weights.items()}


def time_features(t, T: int) -> np.ndarray:
    u = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.linspace(-1.0, 5.0, N_FREQ)
    ang = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@functools.lru_cache(maxsize=8)
def position_features(h: int = SCENE_H, w: int = SCENE_W) -> np.ndarray:
    hh, ww = np.mgrid[0:h, 0:w]
    feats = []
    for coord in (hh, ww):
        for period in POS_PERIODS:
            ang = 2 * np.pi * (coord.reshape(-1) + 0.5) / period
            feats += [np.sin(ang), np.cos(ang)]
    return np.stack(feats, axis=1)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(weights: dict, x, t, tokens, T: int, *, cross_override=None,
            bypass_attention: bool = False):
    """Batched forward pass.

    x: (B, n, C); t: (B,) step indices; tokens: (B, L) ids.
    cross_override: optional (B, n, L) post-softmax cross map.
    Returns ``(eps, cache)`` where ``cache`` feeds :func:`backward` and
    holds the attention maps under ``"A"`` and ``"M"``.
    """
    dt = weights["in_w"].dtype
    x = np.asarray(x, dtype=dt)
    tokens = np.asarray(tokens)
    B, n, _ = x.shape
    if tokens.min() < 0 or tokens.max() >= weights["token_embedding"].shape[0]:
        raise LookupError(f"token id outside vocabulary of size {weights['token_embedding'].shape[0]}")
    side = math.isqrt(n)
    pos = np.broadcast_to(position_features(side, side).astype(dt), (B, n, POS_DIM))
    inp = np.concatenate([x, pos], axis=2)
    tau = time_features(np.broadcast_to(t, (B,)), T).astype(dt)
    temb = tau @ weights["time_w"] + weights["time_b"]
    h0 = inp @ weights["in_w"] + weights["in_b"] + temb[:, None, :]
    cache = {"inp": inp, "tau": tau, "h0": h0, "tokens": tokens, "bypass": bypass_attention}
    scale = 1.0 / math.sqrt(WIDTH)
    if bypass_attention:
        h2 = h0
    else:
        q = h0 @ weights["self_q"]
        k = h0 @ weights["self_k"]
        v = h0 @ weights["self_v"]
        A = _softmax((q @ k.transpose(0, 2, 1)) * dt.type(scale))
        o = A @ v
        h1 = h0 + o @ weights["self_o"]
        e = weights["token_embedding"][tokens]  # (B, L, d)
        qc = h1 @ weights["cross_q"]
        kc = e @ weights["cross_k"]
        vc = e @ weights["cross_v"]
        if cross_override is None:
            M = _softmax((qc @ kc.transpose(0, 2, 1)) * dt.type(scale))
        else:
            M = np.asarray(cross_override, dtype=dt)
            if M.shape != (B, n, tokens.shape[1]):
                raise ContractError(f"cross override has shape {M.shape}, expected {(B, n, tokens.shape[1])}")
        h2 = h1 + M @ vc
        cache.update(q=q, k=k, v=v, A=A, o=o, h1=h1, e=e, qc=qc, kc=kc, vc=vc, M=M,
                     overridden=cross_override is not None)
    z = h2 @ weights["head_w1"] + weights["head_b1"]
    sig = _sigmoid(z)
    a = z * sig
    eps = a @ weights["head_w2"] + weights["head_b2"]
    cache.update(h2=h2, z=z, sig=sig, a=a)
    return eps, cache


def _bsum(a, b):
    """sum_b a[b]^T @ b[b] over the batch: (B, n, p), (B, n, q) -> (p, q)."""
    return np.einsum("bnp,bnq->pq", a, b)


def backward(weights: dict, cache: dict, g_eps) -> dict:
    """Gradients of a scalar loss w.r.t. every weight, given dL/d(eps)."""
    g = {}
    scale = 1.0 / math.sqrt(WIDTH)
    g["head_w2"] = _bsum(cache["a"], g_eps)
    g["head_b2"] = g_eps.sum(axis=(0, 1))
    g_a = g_eps @ weights["head_w2"].T
    z, sig = cache["z"], cache["sig"]
    g_z = g_a * (sig * (1.0 + z * (1.0 - sig)))
    g["head_w1"] = _bsum(cache["h2"], g_z)
    g["head_b1"] = g_z.sum(axis=(0, 1))
    g_h2 = g_z @ weights["head_w1"].T
    emb_grad = np.zeros_like(weights["token_embedding"])
    if cache["bypass"]:
        g_h0 = g_h2
        for name in ("self_q", "self_k", "self_v", "self_o", "cross_q", "cross_k", "cross_v"):
            g[name] = np.zeros_like(weights[name])
    else:
        M, vc, kc, qc, e = cache["M"], cache["vc"], cache["kc"], cache["qc"], cache["e"]
        g_h1 = g_h2.copy()
        g_vc = M.transpose(0, 2, 1) @ g_h2  # (B, L, d)
        if cache["overridden"]:
            # a fixed cross map cuts the path through q_c and k_c
            g_kc = np.zeros_like(kc)
            g["cross_q"] = np.zeros_like(weights["cross_q"])
        else:
            g_M = g_h2 @ vc.transpose(0, 2, 1)  # (B, n, L)
            g_sc = M * (g_M - (g_M * M).sum(-1, keepdims=True)) * scale
            g_qc = g_sc @ kc
            g_kc = g_sc.transpose(0, 2, 1) @ qc
            g["cross_q"] = _bsum(cache["h1"], g_qc)
            g_h1 += g_qc @ weights["cross_q"].T
        g["cross_k"] = _bsum(e, g_kc)
        g["cross_v"] = _bsum(e, g_vc)
        g_e = g_kc @ weights["cross_k"].T + g_vc @ weights["cross_v"].T
        np.add.at(emb_grad, cache["tokens"].reshape(-1), g_e.reshape(-1, WIDTH))

        A, q, k, v, o = cache["A"], cache["q"], cache["k"], cache["v"], cache["o"]
        g["self_o"] = _bsum(o, g_h1)
        g_o = g_h1 @ weights["self_o"].T
        g_A = g_o @ v.transpose(0, 2, 1)
        g_v = A.transpose(0, 2, 1) @ g_o
        g_s = A * (g_A - (g_A * A).sum(-1, keepdims=True)) * scale
        g_q = g_s @ k
        g_k = g_s.transpose(0, 2, 1) @ q
        h0 = cache["h0"]
        g["self_q"] = _bsum(h0, g_q)
        g["self_k"] = _bsum(h0, g_k)
        g["self_v"] = _bsum(h0, g_v)
        g_h0 = g_h1 + g_q @ weights["self_q"].T + g_k @ weights["self_k"].T + g_v @ weights["self_v"].T
    g["token_embedding"] = emb_grad
    g["in_w"] = _bsum(cache["inp"], g_h0)
    g["in_b"] = g_h0.sum(axis=(0, 1))
    g_temb = g_h0.sum(axis=1)  # (B, d)
    g["time_w"] = cache["tau"].T @ g_temb
    g["time_b"] = g_temb.sum(axis=0)
    return g


def mse_loss_and_grads(weights, x, t, tokens, target, T, **kw):
    eps, cache = forward(weights, x, t, tokens, T, **kw)
    diff = eps - np.asarray(target, dtype=eps.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    g_eps = (2.0 / diff.size) * diff
    return loss, backward(weights, cache, g_eps)


class ToyDenoiser:
    """Single-image adapter implementing the denoiser interface."""

    supports_attention = True

    def __init__(self, weights: dict, schedule: NoiseSchedule, dtype=np.float64):
        self.weights = cast_weights(weights, dtype)
        self.schedule = schedule
        self.calls = 0

    def __call__(self, x_t, t, prompt: Prompt, record=False, cross_override=None):
        self.calls += 1
        x_t = np.asarray(x_t)
        h, w, c = x_t.shape
        override = None
        if cross_override is not None:
            cross_override = np.asarray(cross_override)
            if cross_override.shape != (prompt.L, h, w):
                raise ContractError(f"cross override has shape {cross_override.shape}, expected {(prompt.L, h, w)}")
            override = cross_override.reshape(prompt.L, h * w).T[None]
        eps, cache = forward(self.weights, x_t.reshape(1, h * w, c), np.array([t]),
                             np.asarray(prompt.tokens)[None], self.schedule.T, cross_override=override)
        eps = eps[0].reshape(h, w, c).astype(np.float64)
        attn = None
        if record:
            attn = AttentionRecord(
                cross=cache["M"][0].T.reshape(prompt.L, h, w).astype(np.float64),
                self_attn=cache["A"][0].astype(np.float64),
            )
        return eps, attn


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    p_uncond: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    weights: dict
    log: list = field(default_factory=list)  # dicts with epoch, train_mse, val_mse
    seconds: float = 0.0


def _generator(seed: int, *stream) -> np.random.Generator:
    # Philox is counter-based: each (seed, stream) pair gets its own key
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def epoch_batches(data: Dataset, cfg: TrainConfig, schedule: NoiseSchedule, epoch: int):
    """Yield (x_t, t, tokens, eps) for one epoch; fully determined by (seed, epoch)."""
    rng = _generator(cfg.seed, 1, epoch)
    dt = np.dtype(cfg.dtype)
    N = len(data)
    order = rng.permutation(N)
    x0_all = data.images.reshape(N, -1, data.images.shape[-1])
    for start in range(0, N, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x0 = x0_all[idx]
        t = rng.integers(1, schedule.T + 1, size=idx.size)
        eps = rng.standard_normal(x0.shape)
        a = schedule.alpha[t][:, None, None]
        x_t = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
        tokens = data.tokens[idx].copy()
        drop = rng.random(idx.size) < cfg.p_uncond
        tokens[drop] = NULL_TOKEN
        yield x_t.astype(dt), t, tokens, eps.astype(dt)


def evaluation_batches(data: Dataset, schedule: NoiseSchedule, seed: int, batch_size: int = 64,
                       dtype="float32"):
    """Fixed conditional noising of a held-out set, reused every epoch."""
    rng = _generator(seed, 2)
    N = len(data)
    x0_all = data.images.reshape(N, -1, data.images.shape[-1])
    t = rng.integers(1, schedule.T + 1, size=N)
    eps = rng.standard_normal(x0_all.shape)
    a = schedule.alpha[t][:, None, None]
    x_t = np.sqrt(a) * x0_all + np.sqrt(1.0 - a) * eps
    out = []
    for s in range(0, N, batch_size):
        sl = slice(s, s + batch_size)
        out.append((x_t[sl].astype(dtype), t[sl], data.tokens[sl], eps[sl].astype(dtype)))
    return out


def evaluate(weights: dict, batches, T: int) -> float:
    total, count = 0.0, 0
    for x_t, t, tokens, eps in batches:
        pred, _ = forward(weights, x_t, t, tokens, T)
        total += float(np.sum((pred.astype(np.float64) - eps) ** 2))
        count += eps.size
    return total / count


class Adam:
    def __init__(self, weights: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.step = 0

    def update(self, weights: dict, grads: dict) -> None:
        c = self.cfg
        self.step += 1
        bc1 = 1.0 - c.beta1**self.step
        bc2 = 1.0 - c.beta2**self.step
        for name in sorted(weights):
            g = grads[name].astype(weights[name].dtype)
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            step = c.learning_rate * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.eps_adam)
            weights[name] -= step.astype(weights[name].dtype)


def train(cfg: TrainConfig, data: Dataset, schedule: NoiseSchedule, *, progress=None) -> TrainResult:
    """Minimise the epsilon-prediction MSE with Adam and token dropout."""
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    train_set = data.subset("train") if np.any(data.splits == "train") else data
    val_set = data.subset("val") if np.any(data.splits == "val") else data
    weights = init_weights(cfg.seed, dtype=np.dtype(cfg.dtype))
    opt = Adam(weights, cfg)
    val_batches = evaluation_batches(val_set, schedule, cfg.seed, dtype=cfg.dtype)
    result = TrainResult(weights)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for x_t, t, tokens, eps in epoch_batches(train_set, cfg, schedule, epoch):
            loss, grads = mse_loss_and_grads(weights, x_t, t, tokens, eps, schedule.T)
            opt.update(weights, grads)
            total += loss * eps.size
            count += eps.size
        if not all(np.all(np.isfinite(w)) for w in weights.values()):
            raise NumericalError(f"non-finite weights after epoch {epoch}")
        row = {"epoch": epoch, "train_mse": total / count, "val_mse": evaluate(weights, val_batches, schedule.T)}
        result.log.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_mse"], row["val_mse"])
        if progress is not None:
            progress(row)
    result.seconds = time.perf_counter() - t0
    return result


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for r in rows:
            writer.writerow([r["epoch"], repr(float(r["train_mse"])), repr(float(r["val_mse"]))])


# ------------------------------------------------------------ weights file

MAGIC = b"CSGW"
FORMAT_VERSION = 1


def save_weights(path, weights: dict) -> None:
    """Little-endian: magic, u32 version, then per matrix u32 name length,
    name bytes, u32 rank, u32 dims, f32 payload."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name in PARAM_SHAPES:
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path} is not a weights file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported weights format version {version}")
    pos, weights = 8, {}
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        weights[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    missing = set(PARAM_SHAPES) - set(weights)
    if missing:
        raise ConfigError(f"weights file lacks {sorted(missing)}")
    return weights


# --------------------------------------------------------- gradient check


def _sample_arrays(sample):
    x_t, t, prompt, target = sample
    x_t = np.asarray(x_t, dtype=np.float64)
    h, w, c = x_t.shape
    return (x_t.reshape(1, h * w, c), np.array([t]), np.asarray(prompt.tokens)[None],
            np.asarray(target, dtype=np.float64).reshape(1, h * w, c))


def gradient_errors(weights: dict, sample, epsilon: float = 1e-4, T: int = 50,
                    bypass_attention: bool = False) -> dict:
    """Relative error ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)
    per parameter group, in float64.

    ``sample`` is ``(x_t, t, prompt, target_eps)``.
    """
    w64 = cast_weights(weights, np.float64)
    x, t, tokens, target = _sample_arrays(sample)

    def loss(ws):
        eps, _ = forward(ws, x, t, tokens, T, bypass_attention=bypass_attention)
        return float(np.mean((eps - target) ** 2))

    _, grads = mse_loss_and_grads(w64, x, t, tokens, target, T, bypass_attention=bypass_attention)
    errors = {}
    for name in PARAM_SHAPES:
        if bypass_attention and name.startswith(("self_", "cross_", "token_")):
            continue
        p = w64[name]
        numeric = np.zeros_like(p)
        flat, nflat = p.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss(w64)
            flat[i] = orig - epsilon
            down = loss(w64)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * epsilon)
        ga = grads[name]
        denom = max(np.linalg.norm(ga), np.linalg.norm(numeric))
        errors[name] = 0.0 if denom < 1e-300 else float(np.linalg.norm(ga - numeric) / denom)
    return errors


def gradient_check(weights: dict, sample, epsilon: float = 1e-4, T: int = 50,
                   bypass_attention: bool = False) -> float:
    """Worst relative error of the hand-written backward pass over all groups."""
    return max(gradient_errors(weights, sample, epsilon, T, bypass_attention).values())
