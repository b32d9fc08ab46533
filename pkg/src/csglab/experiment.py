"""Paired editing experiments over seeded scene lists."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import gmm
from .config import output_path, require, resolve, section
from .denoiser import ToyDenoiser, load_weights
from .errors import ConfigError
from .imageio import write_pgm, write_ppm
from .masks import MaskBundle
from .metrics import ShapeClassifier, alignment_score, bg_distance, distance_matrix, relational_distance, structure_distance
from .sampler import METHODS, GuidanceConfig, edit, invert_with_cache
from .scenes import BG_CLASSES, SHAPE_CLASSES, generate_scene, scene_seeds, token_of
from .schedule import make_schedule

ABLATION_METHODS = ("ddim", "csg_nomix", "csg")


def build_schedule(cfg: dict):
    sec = section(cfg, "schedule")
    return make_schedule(require(sec, "T", "schedule"), float(require(sec, "alpha_T", "schedule")),
                         require(sec, "kind", "schedule"))


def guidance_config(cfg: dict, schedule) -> GuidanceConfig:
    sec = dict(section(cfg, "guidance"))
    sec.pop("method", None)
    unknown = set(sec) - set(GuidanceConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown guidance options {sorted(unknown)}")
    sec["steps"] = schedule.T
    return GuidanceConfig(**sec)


def load_gmm_task(cfg: dict) -> gmm.GmmTask:
    backend = section(cfg, "backend")
    if "task" in backend:
        return gmm.GmmTask.from_dict(backend["task"])
    if "task_path" in backend:
        path = resolve(cfg, backend["task_path"])
        if not path.exists():
            raise ConfigError(f"GMM task file {path} not found")
        return gmm.GmmTask.load(path)
    return gmm.reference_task(int(backend.get("task_seed", 0)))


def build_backend(cfg: dict, schedule):
    backend = section(cfg, "backend")
    kind = require(backend, "kind", "backend")
    if kind == "toy":
        path = resolve(cfg, require(backend, "weights", "backend"))
        if not path.exists():
            # weights produced by `train` land under output_dir
            alt = output_path(cfg, backend["weights"])
            if not alt.exists():
                raise ConfigError(f"weights file {path} not found")
            path = alt
        return ToyDenoiser(load_weights(path), schedule)
    if kind == "analytic":
        return gmm.GmmDenoiser(load_gmm_task(cfg), schedule)
    raise ConfigError(f"unknown backend kind {kind!r}; expected 'toy' or 'analytic'")


def load_classifier(cfg: dict) -> Optional[ShapeClassifier]:
    sec = cfg.get("classifier") or {}
    if "path" not in sec:
        return None
    for p in (resolve(cfg, sec["path"]), output_path(cfg, sec["path"])):
        if p.exists():
            return ShapeClassifier.load(p)
    return None


def task_items(cfg: dict, backend) -> list:
    """Seeded source items: dicts with index, image, fg mask, source and target prompts."""
    task = section(cfg, "task")
    n = int(require(task, "n_scenes", "task"))
    seed = int(require(task, "seed", "task"))
    src, tgt = require(task, "src_prompt", "task"), require(task, "tgt_prompt", "task")
    items = []
    if isinstance(backend, gmm.GmmDenoiser):
        src_c, tgt_c = int(src), int(tgt)
        for i in range(n):
            g, _ = scene_seeds(seed, i)
            x = gmm.sample_x0(backend.task, src_c, g)
            items.append({"index": i, "image": x, "fg_mask": np.zeros(x.shape[:2], dtype=bool),
                          "y_src": gmm.class_prompt(src_c), "y_tgt": gmm.class_prompt(tgt_c),
                          "tgt_class": str(tgt_c)})
        return items
    if src not in SHAPE_CLASSES or tgt not in SHAPE_CLASSES:
        raise ConfigError(f"task prompts must be shape classes {SHAPE_CLASSES}")
    k = int(task.get("k", 1))
    if k != 1:
        raise ConfigError("scene prompts edit token index 1")
    for i in range(n):
        g, s = scene_seeds(seed, i)
        scene = generate_scene(BG_CLASSES[i % len(BG_CLASSES)], src, g, s)
        items.append({"index": i, "image": scene.image, "fg_mask": scene.fg_mask, "y_src": scene.prompt,
                      "y_tgt": scene.prompt.replace(k, token_of(tgt)), "tgt_class": tgt})
    return items


# worker state, filled by _init_worker in each process (or inline for jobs=1)
_STATE: dict = {}


def _init_worker(cfg: dict, methods: Sequence[str]):
    schedule = build_schedule(cfg)
    backend = build_backend(cfg, schedule)
    _STATE.update(cfg=cfg, methods=tuple(methods), schedule=schedule, backend=backend,
                  guidance=guidance_config(cfg, schedule), classifier=load_classifier(cfg))


def _ones_mask(item, cfg: GuidanceConfig) -> MaskBundle:
    return MaskBundle.from_background(np.ones(item["image"].shape[:2]), cfg.lambda_pre, cfg.delta)


def _process(item: dict) -> dict:
    st = _STATE
    d, s, base = st["backend"], st["schedule"], st["guidance"]
    attention = getattr(d, "supports_attention", False)
    inv_cfg = base if attention else base.for_method("csg_nomix")
    cache = invert_with_cache(item["image"], item["y_src"], d, s, inv_cfg)
    outputs, reports, masks = {}, {}, None
    for method in st["methods"]:
        mcfg = base.for_method(method)
        if not attention:
            if mcfg.mixup_enabled:
                mcfg = mcfg.for_method("csg_nomix")
            x, rep = edit(item["image"], item["y_src"], item["y_tgt"], d, s, mcfg, masks=_ones_mask(item, mcfg), cache=cache)
        else:
            x, rep = edit(item["image"], item["y_src"], item["y_tgt"], d, s, mcfg, cache=cache)
        outputs[method], reports[method] = x, rep
        masks = rep.masks
    return {"index": item["index"], "outputs": outputs, "reports": reports,
            "background": masks.background, "content": masks.content}


def _metric_row(cfg, item, method, x, classifier) -> dict:
    task = section(cfg, "task")
    bg = ~item["fg_mask"]
    align = float("nan")
    if classifier is not None and item["tgt_class"] in classifier.classes:
        align = alignment_score(x, item["tgt_class"], classifier)
    return {"task": task.get("name", "task"), "method": method, "seed": item["index"],
            "bg_mse": bg_distance(item["image"], x, bg), "structure_proxy": structure_distance(item["image"], x),
            "rd": float("nan"), "gamma_star": float("nan"), "alignment": align}


def run_methods(cfg: dict, methods: Sequence[str], out_dir, jobs: int = 1,
                emit: Optional[Callable] = None, save_artifacts: bool = True) -> dict:
    """Run ``methods`` on the task's scene list; paired by scene index.

    Returns ``{"rows", "items", "results"}``; rows are the metric records in
    (method, seed) order and do not depend on ``jobs``.
    """
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    _init_worker(cfg, methods)
    items = task_items(cfg, _STATE["backend"])
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cfg, methods)) as pool:
            results = list(pool.map(_process, items))
    else:
        results = []
        for item in items:
            results.append(_process(item))
            if emit:
                emit("scene_done", index=item["index"], elapsed=round(time.perf_counter() - t0, 3))
    results.sort(key=lambda r: r["index"])
    classifier = _STATE["classifier"]
    rows = []
    for method in methods:
        mrows = [_metric_row(cfg, it, method, res["outputs"][method], classifier) for it, res in zip(items, results)]
        if len(items) >= 2:
            G_src = distance_matrix([it["image"] for it in items], "pixel_l2")
            G_tgt = distance_matrix([res["outputs"][method] for res in results], "pixel_l2")
            rd, g = relational_distance(G_src, G_tgt)
            for r in mrows:
                r["rd"], r["gamma_star"] = rd, g
        rows.extend(mrows)
    if save_artifacts:
        _save_artifacts(Path(out_dir), methods, items, results)
    return {"rows": rows, "items": items, "results": results}


def _save_artifacts(out: Path, methods, items, results):
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "source": np.stack([it["image"] for it in items]),
        "fg_mask": np.stack([it["fg_mask"] for it in items]),
        "background": np.stack([r["background"] for r in results]),
        "index": np.array([it["index"] for it in items]),
        "tgt_class": np.array([it["tgt_class"] for it in items]),
    }
    for m in methods:
        arrays[f"out_{m}"] = np.stack([r["outputs"][m] for r in results])
    np.savez_compressed(out / "arrays.npz", **arrays)
    is_image = items[0]["image"].ndim == 3 and items[0]["image"].shape[2] == 3
    for m in methods:
        mdir = out / m
        mdir.mkdir(exist_ok=True)
        for it, res in zip(items, results):
            stem = f"scene_{it['index']:04d}"
            rep = res["reports"][m]
            if is_image:
                write_ppm(mdir / f"{stem}.ppm", res["outputs"][m])
                rep.output_image = f"{stem}.ppm"
            (mdir / f"{stem}.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    if is_image:
        from . import plotting

        examples = [{"source": it["image"], "background": res["background"], "outputs": res["outputs"]}
                    for it, res in list(zip(items, results))[:4]]
        plotting.example_grid(examples, out / "examples.png")


def rows_from_arrays(cfg: dict, arrays_path) -> list:
    """Recompute metric rows from a saved ``arrays.npz``."""
    task_name = section(cfg, "task").get("name", "task")
    classifier = load_classifier(cfg)
    with np.load(arrays_path) as z:
        data = {k: z[k] for k in z.files}
    methods = [k[4:] for k in data if k.startswith("out_")]
    order = [m for m in ABLATION_METHODS if m in methods] + [m for m in methods if m not in ABLATION_METHODS]
    items = [{"index": int(i), "image": src, "fg_mask": fg, "tgt_class": str(tc)}
             for i, src, fg, tc in zip(data["index"], data["source"], data["fg_mask"], data["tgt_class"])]
    rows = []
    for m in order:
        outs = data[f"out_{m}"]
        mrows = [_metric_row({"task": {"name": task_name}}, it, m, x, classifier) for it, x in zip(items, outs)]
        if len(items) >= 2:
            rd, g = relational_distance(distance_matrix([it["image"] for it in items]), distance_matrix(list(outs)))
            for r in mrows:
                r["rd"], r["gamma_star"] = rd, g
        rows.extend(mrows)
    return rows


def invert_items(cfg: dict, out_dir, emit=None) -> list:
    """Invert each task scene; save latents and masks."""
    schedule = build_schedule(cfg)
    d = build_backend(cfg, schedule)
    base = guidance_config(cfg, schedule)
    if not getattr(d, "supports_attention", False):
        base = base.for_method("csg_nomix")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .sampler import build_masks

    saved = []
    for item in task_items(cfg, d):
        cache = invert_with_cache(item["image"], item["y_src"], d, schedule, base)
        stem = f"scene_{item['index']:04d}"
        np.savez_compressed(out / f"{stem}_latents.npz", latents=np.stack(cache.latents))
        if cache.summary is not None:
            masks = build_masks(cache, item["y_src"].k, base)
            write_pgm(out / f"{stem}_background.pgm", masks.background)
            write_pgm(out / f"{stem}_content.pgm", masks.content)
            write_pgm(out / f"{stem}_token_map.pgm", cache.summary.cross_avg[item["y_src"].k])
            if not saved:
                from . import plotting

                plotting.mask_schedule(masks.background, schedule.T, base.delta, out / "mask_schedule.png")
        saved.append(stem)
        if emit:
            emit("inverted", index=item["index"])
    return saved
