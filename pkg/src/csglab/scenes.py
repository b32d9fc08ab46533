"""Procedural toy scenes: a patterned background plus one coloured shape.

Shape classes carry their own colour as well as their geometry, so a
shape token determines the foreground appearance the way a noun does in a
text prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .imageio import write_pgm, write_ppm

H = W = 16
C = 3
NULL_TOKEN = 0
PIXEL_NOISE_STD = 0.02

BG_CLASSES = ("solid_warm", "solid_cool", "stripes", "checker")
SHAPE_CLASSES = ("disc", "square", "cross")
VOCAB = ("<null>",) + BG_CLASSES + SHAPE_CLASSES
VOCAB_SIZE = len(VOCAB)

SHAPE_COLORS = {
    "disc": (0.9, 0.85, -0.8),
    "square": (-0.85, 0.8, -0.2),
    "cross": (0.85, -0.8, 0.9),
}
_BG_COLORS = {
    "solid_warm": ((0.55, 0.0, -0.45),),
    "solid_cool": ((-0.5, -0.1, 0.45),),
    "stripes": ((0.2, 0.2, 0.2), (-0.55, -0.55, -0.3)),
    "checker": ((-0.2, -0.6, -0.1), (0.35, 0.3, 0.05)),
}


@dataclass(frozen=True)
class Prompt:
    tokens: tuple
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(v) for v in self.tokens))
        if len(self.tokens) < 1:
            raise ContractError("a prompt needs at least one token")
        if not 0 <= self.k < len(self.tokens):
            raise ContractError(f"edited index {self.k} outside prompt of length {len(self.tokens)}")
        if any(v < 0 for v in self.tokens):
            raise ContractError("token ids must be nonnegative")

    @property
    def L(self) -> int:
        return len(self.tokens)

    def null(self) -> "Prompt":
        return Prompt((NULL_TOKEN,) * self.L, self.k)

    def is_null(self) -> bool:
        return all(v == NULL_TOKEN for v in self.tokens)

    def replace(self, index: int, token: int) -> "Prompt":
        tokens = list(self.tokens)
        tokens[index] = token
        return Prompt(tuple(tokens), self.k)


@dataclass
class Scene:
    image: np.ndarray
    fg_mask: np.ndarray
    prompt: Prompt
    meta: dict = field(default_factory=dict)


def token_of(name: str) -> int:
    try:
        return VOCAB.index(name)
    except ValueError:
        raise ConfigError(f"unknown class name {name!r}") from None


def encode_prompt(bg_class: str, shape_class: str) -> Prompt:
    if bg_class not in BG_CLASSES:
        raise ConfigError(f"unknown background class {bg_class!r}")
    if shape_class not in SHAPE_CLASSES:
        raise ConfigError(f"unknown shape class {shape_class!r}")
    return Prompt((token_of(bg_class), token_of(shape_class)), k=1)


def decode_prompt(prompt: Prompt) -> tuple[str, str]:
    bg, shape = (VOCAB[i] for i in prompt.tokens)
    return bg, shape


def render_background(bg_class: str) -> np.ndarray:
    if bg_class not in BG_CLASSES:
        raise ConfigError(f"unknown background class {bg_class!r}")
    colors = np.array(_BG_COLORS[bg_class])
    hh, ww = np.mgrid[0:H, 0:W]
    if bg_class == "stripes":
        idx = (ww // 4) % 2
    elif bg_class == "checker":
        idx = (hh // 4 + ww // 4) % 2
    else:
        idx = np.zeros((H, W), dtype=int)
    return colors[idx]


def shape_mask(shape_class: str, cy: float, cx: float, r: float) -> np.ndarray:
    """Pixels whose centre falls inside the shape."""
    if shape_class not in SHAPE_CLASSES:
        raise ConfigError(f"unknown shape class {shape_class!r}")
    hh, ww = np.mgrid[0:H, 0:W] + 0.5
    dy, dx = np.abs(hh - cy), np.abs(ww - cx)
    if shape_class == "disc":
        return dy**2 + dx**2 <= r**2
    if shape_class == "square":
        return (dy < r) & (dx < r)
    arm = 1.5
    return ((dy < r) & (dx < arm)) | ((dx < r) & (dy < arm))


def sample_geometry(geometry_seed: int) -> dict:
    rng = np.random.default_rng(geometry_seed)
    cy, cx = rng.uniform(4.0, H - 4.0, size=2)
    r = rng.uniform(3.0, 5.0)
    return {"cy": float(cy), "cx": float(cx), "r": float(r)}


def generate_scene(bg_class: str, shape_class: str, geometry_seed: int,
                   noise_seed: Optional[int], *, geometry: Optional[dict] = None) -> Scene:
    """Render a scene. ``noise_seed=None`` skips the pixel noise."""
    prompt = encode_prompt(bg_class, shape_class)
    geo = dict(geometry) if geometry is not None else sample_geometry(geometry_seed)
    mask = shape_mask(shape_class, geo["cy"], geo["cx"], geo["r"])
    image = render_background(bg_class)
    image[mask] = SHAPE_COLORS[shape_class]
    if noise_seed is not None:
        image = image + np.random.default_rng(noise_seed).normal(0.0, PIXEL_NOISE_STD, image.shape)
    image = np.clip(image, -1.0, 1.0)
    meta = {"bg_class": bg_class, "shape_class": shape_class, **geo}
    return Scene(image=image, fg_mask=mask, prompt=prompt, meta=meta)


def scene_seeds(seed: int, index: int) -> tuple[int, int]:
    """Derive (geometry_seed, noise_seed) for scene ``index`` of a seeded list."""
    ss = np.random.SeedSequence([seed, index])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def _class_pairs(class_mix) -> tuple[list, np.ndarray]:
    pairs = [(b, s) for b in BG_CLASSES for s in SHAPE_CLASSES]
    if class_mix is None or class_mix == "uniform":
        return pairs, np.full(len(pairs), 1.0 / len(pairs))
    weights = []
    for key in class_mix:
        bg, shape = key if isinstance(key, tuple) else key.split("/")
        if (bg, shape) not in pairs:
            raise ConfigError(f"unknown class pair {key!r}")
    for bg, shape in pairs:
        weights.append(class_mix.get((bg, shape), class_mix.get(f"{bg}/{shape}", 0.0)))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise ConfigError("class_mix has no positive weight")
    return pairs, weights / weights.sum()


def iter_scenes(n: int, class_mix=None, seed: int = 0):
    """Yield ``(index, split, scene)`` for a seeded, reproducible scene list."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    pairs, probs = _class_pairs(class_mix)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1]))
    choices = rng.choice(len(pairs), size=n, p=probs)
    for i, c in enumerate(choices):
        g, s = scene_seeds(seed, i)
        bg, shape = pairs[c]
        split = "val" if i % 10 == 9 else "train"
        yield i, split, generate_scene(bg, shape, g, s)


def build_dataset(n: int, out_dir, class_mix=None, seed: int = 0) -> Path:
    """Write ``n`` scenes as PPM/PGM pairs plus ``manifest.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, split, scene in iter_scenes(n, class_mix, seed):
        img_name, mask_name = f"scene_{i:05d}.ppm", f"scene_{i:05d}_mask.pgm"
        write_ppm(out / img_name, scene.image)
        write_pgm(out / mask_name, scene.fg_mask)
        lines.append(json.dumps({
            "image": img_name,
            "mask": mask_name,
            "tokens": list(scene.prompt.tokens),
            "bg_class": scene.meta["bg_class"],
            "shape_class": scene.meta["shape_class"],
            "split": split,
        }))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    masks: np.ndarray  # (N, H, W) bool
    tokens: np.ndarray  # (N, L) int
    splits: np.ndarray  # (N,) str

    def __len__(self):
        return len(self.images)

    def subset(self, split: str) -> "Dataset":
        keep = self.splits == split
        return Dataset(self.images[keep], self.masks[keep], self.tokens[keep], self.splits[keep])


def load_dataset(path) -> Dataset:
    from .imageio import read_pgm, read_ppm

    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"no manifest.jsonl under {root}")
    images, masks, tokens, splits = [], [], [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        images.append(read_ppm(root / rec["image"]))
        masks.append(read_pgm(root / rec["mask"]) > 127)
        tokens.append(rec["tokens"])
        splits.append(rec["split"])
    if not images:
        raise ConfigError(f"dataset at {root} is empty")
    return Dataset(np.stack(images), np.stack(masks), np.asarray(tokens, dtype=np.int64), np.asarray(splits))


def dataset_in_memory(n: int, class_mix=None, seed: int = 0) -> Dataset:
    """Same scenes as :func:`build_dataset` without touching disk or quantising."""
    images, masks, tokens, splits = [], [], [], []
    for _, split, scene in iter_scenes(n, class_mix, seed):
        images.append(scene.image)
        masks.append(scene.fg_mask)
        tokens.append(scene.prompt.tokens)
        splits.append(split)
    return Dataset(np.stack(images), np.stack(masks), np.asarray(tokens, dtype=np.int64), np.asarray(splits))
