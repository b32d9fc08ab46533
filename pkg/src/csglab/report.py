"""Metric tables: raw CSV rows plus a JSON summary (means, medians, paired win rates)."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from statistics import median

FIELDS = ("task", "method", "seed", "bg_mse", "structure_proxy", "rd", "gamma_star", "alignment")
LOWER_IS_BETTER = {"bg_mse": True, "structure_proxy": True, "rd": True, "alignment": False}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for r in rows:
        writer.writerow([_fmt(r[f]) for f in FIELDS])
    return buf.getvalue()


def read_rows(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {"task": rec["task"], "method": rec["method"], "seed": int(rec["seed"])}
            for f in FIELDS[3:]:
                row[f] = float(rec[f])
            rows.append(row)
    return rows


def _win_rate(a: list, b: list, lower: bool) -> float:
    score = 0.0
    for x, y in zip(a, b):
        if x == y:
            score += 0.5
        elif (x < y) == lower:
            score += 1.0
    return score / len(a)


def summarize(rows) -> dict:
    """Per-method mean/median of every metric; pairwise win rates over matched (task, seed).

    Ties, including a method against itself, count half a win.
    """
    methods = list(dict.fromkeys(r["method"] for r in rows))
    out = {"n_rows": len(rows), "methods": {}, "win_rates": {}}
    by_method = {m: [r for r in rows if r["method"] == m] for m in methods}
    for m, rs in by_method.items():
        stats = {}
        for metric in LOWER_IS_BETTER:
            vals = [r[metric] for r in rs if not math.isnan(r[metric])]
            stats[metric] = {"mean": sum(vals) / len(vals) if vals else float("nan"),
                             "median": median(vals) if vals else float("nan")}
        stats["n"] = len(rs)
        out["methods"][m] = stats
    for metric, lower in LOWER_IS_BETTER.items():
        table = {}
        for a in methods:
            ka = {(r["task"], r["seed"]): r[metric] for r in by_method[a]}
            table[a] = {}
            for b in methods:
                kb = {(r["task"], r["seed"]): r[metric] for r in by_method[b]}
                keys = [k for k in ka if k in kb and not (math.isnan(ka[k]) or math.isnan(kb[k]))]
                table[a][b] = _win_rate([ka[k] for k in keys], [kb[k] for k in keys], lower) if keys else float("nan")
        out["win_rates"][metric] = table
    return out


def write_report(rows, out, figures: bool = True) -> dict:
    """Write ``metrics.csv`` and ``summary.json`` under ``out``; figures too when asked."""
    rows = list(rows)
    if not rows:
        raise ValueError("write_report needs at least one row")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(rows))
    summary = summarize(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if figures:
        from . import plotting

        plotting.metric_bars(summary, "bg_mse", out / "bg_mse.png")
        methods = list(summary["methods"])
        if "ddim" in methods:
            for m in methods:
                if m != "ddim":
                    plotting.paired_scatter(rows, "bg_mse", "ddim", m, out / f"paired_bg_mse_{m}.png")
    return summary
