"""Summary tables, survival grids and the run manifest.

All numbers are written with three decimals and a period separator whatever
the locale, so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import ContractError
from .marginals import LogScaleDensity, summarize
from .model import INTERCEPT, LatencyFamily

SUMMARY_COLUMNS = ("parameter", "mean", "sd", "ci_low", "ci_high", "p_gt_0")
CURE_COLUMNS = ("profile", "mean", "sd", "ci_low", "ci_high")
SURVIVAL_COLUMNS = ("t", "group", "mean_Su")
LATENCY_INTERCEPT = f"{INTERCEPT}[latency]"


def summary_table(marginals, family=LatencyFamily.WEIBULL_PH, level: float = 0.95) -> list:
    """One row per parameter from averaged marginals.

    ``alpha`` carries no ``P(> 0)``.  Under the PH family the latency
    intercept is also reported on the exponential scale.
    """
    family = LatencyFamily.parse(family)
    rows = []
    for name, dens in zip(marginals.names, marginals.densities):
        row = dict(parameter=name, **summarize(dens, level))
        if name == "alpha":
            row["p_gt_0"] = None
        rows.append(row)
        if name == LATENCY_INTERCEPT and family is LatencyFamily.WEIBULL_PH:
            ex = dict(parameter=f"exp({name})", **summarize(LogScaleDensity(dens), level))
            ex["p_gt_0"] = None
            rows.append(ex)
    return rows


def summary_from_draws(names: Sequence[str], draws, family=LatencyFamily.WEIBULL_PH,
                       level: float = 0.95) -> list:
    """Same layout as :func:`summary_table` from posterior draws (last column ``log_alpha``)."""
    family = LatencyFamily.parse(family)
    draws = np.asarray(draws, dtype=float)
    tail = 50.0 * (1.0 - level)

    def row(name, x, sign=True):
        lo, hi = np.percentile(x, [tail, 100.0 - tail])
        return {"parameter": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)),
                "ci_low": float(lo), "ci_high": float(hi),
                "p_gt_0": float(np.mean(x > 0)) if sign else None}

    rows = []
    for j, name in enumerate(names):
        x = draws[:, j]
        if j == len(names) - 1:
            rows.append(row("alpha", np.exp(x), sign=False))
            continue
        rows.append(row(name, x))
        if name == LATENCY_INTERCEPT and family is LatencyFamily.WEIBULL_PH:
            rows.append(row(f"exp({name})", np.exp(x), sign=False))
    return rows


def survival_grid(times, groups: Sequence[str], curves) -> list:
    """Long-format rows ``{t, group, mean_Su}``; curves are clipped to [0, 1]."""
    times = np.asarray(times, dtype=float)
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    if times.ndim != 1 or np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ContractError("time grid must be positive and strictly increasing")
    if curves.shape != (len(groups), times.size):
        raise ContractError("need one curve per group over the whole time grid")
    rows = []
    for g, curve in zip(groups, curves):
        c = np.minimum.accumulate(np.clip(curve, 0.0, 1.0))
        rows.extend({"t": float(t), "group": g, "mean_Su": float(v)} for t, v in zip(times, c))
    return rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    v = float(v)
    if not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    out = f"{v:.3f}"
    return "0.000" if out == "-0.000" else out


def write_table(rows: Iterable[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_manifest(path, manifest: dict) -> None:
    """Structured run record: sorted-key JSON without timestamps."""
    text = json.dumps(_plain(manifest), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_outputs(out_dir, summary: list, cure: Optional[list], survival: Optional[list],
                  manifest: dict) -> Path:
    """Write ``summary.csv``, ``cure.csv``, ``survival.csv`` and ``manifest.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(summary, out / "summary.csv", SUMMARY_COLUMNS)
    if cure is not None:
        write_table(cure, out / "cure.csv", CURE_COLUMNS)
    if survival is not None:
        write_table(survival, out / "survival.csv", SURVIVAL_COLUMNS)
    write_manifest(out / "manifest.txt", manifest)
    return out
