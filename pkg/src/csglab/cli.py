"""``csglab`` command line.

    csglab <subcommand> --config path [--set section.key=value]... [--jobs N]

stdout carries JSON Lines progress events; diagnostics go to stderr.
Exit codes: 2 usage, 3 configuration, 4 runtime/numerical/I-O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import experiment
from .config import load_config, output_path, require, resolve, section
from .errors import ConfigError, NumericalError

log = logging.getLogger("csglab")

SUBCOMMANDS = ("make-dataset", "train", "train-classifier", "invert", "edit", "ablate", "eval", "render")
EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 2, 3, 4


def _jsonable(v):
    # NaN/inf are not JSON; emit null
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


class _Emitter:
    def __init__(self, stream=None):
        self.stream = stream or sys.stdout
        self.t0 = time.perf_counter()

    def __call__(self, event: str, **fields):
        rec = {"event": event, "t": round(time.perf_counter() - self.t0, 3), **_jsonable(fields)}
        self.stream.write(json.dumps(rec, allow_nan=False) + "\n")
        self.stream.flush()


def cmd_make_dataset(cfg, args, emit):
    from .scenes import build_dataset

    sec = section(cfg, "dataset")
    out = output_path(cfg, sec.get("dir", "dataset"))
    build_dataset(int(require(sec, "n", "dataset")), out, sec.get("class_mix", "uniform"), int(sec.get("seed", 0)))
    emit("dataset_written", path=str(out), n=int(sec["n"]))


def cmd_train(cfg, args, emit):
    from .denoiser import TrainConfig, save_weights, train, write_training_log
    from .plotting import training_curve
    from .scenes import load_dataset

    schedule = experiment.build_schedule(cfg)
    data_dir = output_path(cfg, section(cfg, "dataset").get("dir", "dataset"))
    if not (data_dir / "manifest.jsonl").exists():
        raise ConfigError(f"no dataset at {data_dir}; run make-dataset first")
    data = load_dataset(data_dir)
    sec = dict(section(cfg, "train"))
    weights_path = output_path(cfg, sec.pop("weights", "weights.bin"))
    log_path = output_path(cfg, sec.pop("log", "train_log.csv"))
    tcfg = TrainConfig.from_dict(sec)
    result = train(tcfg, data, schedule, progress=lambda row: emit("epoch", **row))
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights_path, result.weights)
    write_training_log(log_path, result.log)
    training_curve(result.log, log_path.with_suffix(".png"))
    emit("trained", weights=str(weights_path), seconds=round(result.seconds, 2))


def cmd_train_classifier(cfg, args, emit):
    from .metrics import train_classifier

    sec = section(cfg, "classifier")
    clf = train_classifier(int(sec.get("n_scenes", 3000)), int(sec.get("seed", 0)), int(sec.get("epochs", 30)))
    path = output_path(cfg, sec.get("path", "classifier.npz"))
    path.parent.mkdir(parents=True, exist_ok=True)
    clf.save(path)
    emit("classifier_trained", path=str(path), val_accuracy=clf.val_accuracy)


def _run_dir(cfg, name):
    return output_path(cfg, name)


def cmd_invert(cfg, args, emit):
    out = _run_dir(cfg, "invert")
    saved = experiment.invert_items(cfg, out, emit)
    emit("inversion_done", path=str(out), n=len(saved))


def _finish(cfg, rows, out, emit):
    from .report import write_report

    summary = write_report(rows, out)
    emit("report_written", path=str(out), methods=list(summary["methods"]))
    return summary


def cmd_edit(cfg, args, emit):
    method = section(cfg, "guidance").get("method", "csg")
    out = _run_dir(cfg, f"edit_{method}")
    res = experiment.run_methods(cfg, [method], out, jobs=args.jobs, emit=emit)
    _finish(cfg, res["rows"], out, emit)


def cmd_ablate(cfg, args, emit):
    out = _run_dir(cfg, "ablate")
    res = experiment.run_methods(cfg, list(experiment.ABLATION_METHODS), out, jobs=args.jobs, emit=emit)
    summary = _finish(cfg, res["rows"], out, emit)
    for m, stats in summary["methods"].items():
        emit("method_summary", method=m, bg_mse_mean=stats["bg_mse"]["mean"],
             alignment_mean=stats["alignment"]["mean"])


def cmd_eval(cfg, args, emit):
    sec = cfg.get("eval") or {}
    run_dir = resolve(cfg, sec["run_dir"]) if "run_dir" in sec else _run_dir(cfg, "ablate")
    arrays = run_dir / "arrays.npz"
    if not arrays.exists():
        raise ConfigError(f"no arrays.npz under {run_dir}; run edit or ablate first")
    rows = experiment.rows_from_arrays(cfg, arrays)
    _finish(cfg, rows, run_dir / "eval", emit)


def cmd_render(cfg, args, emit):
    from .imageio import write_pgm, write_ppm

    sec = section(cfg, "render")
    out = output_path(cfg, sec.get("out_dir", "render"))
    out.mkdir(parents=True, exist_ok=True)
    for name in require(sec, "inputs", "render"):
        path = resolve(cfg, name)
        if not path.exists():
            raise ConfigError(f"render input {path} not found")
        if path.suffix == ".npz":
            with np.load(path) as z:
                arrays = {f"{path.stem}_{k}": z[k] for k in z.files}
        else:
            arrays = {path.stem: np.load(path)}
        for stem, arr in arrays.items():
            stacked = arr.ndim == 4 or (arr.ndim == 3 and arr.shape[-1] != 3)
            pairs = [(f"{stem}_{i:04d}", a) for i, a in enumerate(arr)] if stacked else [(stem, arr)]
            for name_i, a in pairs:
                target = out / name_i
                if a.ndim == 3 and a.shape[-1] == 3:
                    target = target.with_suffix(".ppm")
                    write_ppm(target, a)
                elif a.ndim == 2 and (a.dtype == bool or (a.min() >= 0 and a.max() <= 1)):
                    target = target.with_suffix(".pgm")
                    write_pgm(target, a)
                else:
                    log.info("skipping %s: not an image array", name_i)
                    continue
                emit("rendered", path=str(target))


HANDLERS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "train-classifier": cmd_train_classifier,
    "invert": cmd_invert,
    "edit": cmd_edit,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csglab", description="Conditional score guidance editing lab.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. guidance.lambda_pre=5")
    p.add_argument("--jobs", type=int, default=1, help="scene-level worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    emit = _Emitter()
    try:
        cfg = load_config(args.config, args.overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        HANDLERS[args.subcommand](cfg, args, emit)
    except ConfigError as exc:
        print(f"csglab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"csglab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"csglab: I/O failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    emit("done", subcommand=args.subcommand)
    return 0


if __name__ == "__main__":
    sys.exit(main())
