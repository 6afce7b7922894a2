"""State-exploration sweeps over ``(M, eta)`` grids.

Layout under ``out_dir``::

    cells/<variant>__m<M>_eta<eta>.csv     one run per grid cell
    baselines/<variant>.csv                exploration off (optional)
    summary.csv                            reduction of the above

The summary depends only on those CSV files, so :func:`summarize_sweep`
can rebuild it offline.
"""
from __future__ import annotations

import csv
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig
from .experiment import run_experiment
from .metrics import COLUMNS, failure_row, convergence_epoch, plateau_mean, read_metrics

__all__ = ["WORKERS_ENV", "SUMMARY_COLUMNS", "cell_name", "run_sweep", "summarize_sweep",
           "worker_count"]

log = logging.getLogger(__name__)

WORKERS_ENV = "D2RL_WORKERS"
SUMMARY_COLUMNS = ("variant", "m", "eta", "status", "epochs", "convergence_epoch",
                   "plateau_sum_rate", "actor_grad_weight_sum", "actor_grad_bias_sum",
                   "grad_improvement", "best")
_CELL_RE = re.compile(r"^(?P<variant>[a-z_]+)__m(?P<m>[^_]+)_eta(?P<eta>.+)$")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def cell_name(variant: str, m: float, eta: float) -> str:
    return f"{variant}__m{float(m)!r}_eta{float(eta)!r}"


def _run_cell(args) -> str:
    cfg, out_dir, name = args
    try:
        run_experiment(cfg, out_dir, name=name, checkpoint=False)
        return "ok"
    except Exception as exc:  # a broken cell must not stop the sweep
        log.error("cell %s failed: %s", name, exc)
        with open(Path(out_dir) / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            w.writerow(failure_row(0))
        return f"error: {exc}"


def run_sweep(base: ExperimentConfig, m_grid, eta_grid, out_dir, variants=None,
              baseline: bool = True, workers: int | None = None) -> list[dict]:
    """Run every ``(variant, M, eta)`` cell and return the summary rows.

    ``variants`` defaults to the base config's reward variant. Cells run in
    a process pool of ``workers`` (default from ``D2RL_WORKERS``, else 1).
    """
    m_grid, eta_grid = list(m_grid), list(eta_grid)
    if not m_grid or not eta_grid:
        raise ValueError("M and eta grids must be nonempty")
    variants = [base.reward_variant] if variants is None else list(variants)
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    jobs = []
    for v in variants:
        if baseline:
            (out / "baselines").mkdir(exist_ok=True)
            jobs.append((base.replace(reward_variant=v, state_exploration=False),
                         out / "baselines", v))
        for m in m_grid:
            for eta in eta_grid:
                cfg = base.replace(reward_variant=v, state_exploration=True, se_max_prob=float(m),
                                   se_eta=float(eta))
                jobs.append((cfg, out / "cells", cell_name(v, m, eta)))
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_cell, jobs))
    else:
        for job in jobs:
            _run_cell(job)
    return summarize_sweep(out, window=base.ma_window)


def _grad_sum(run) -> tuple[float, float]:
    return float(np.sum(run["actor_grad_weight"])), float(np.sum(run["actor_grad_bias"]))


def summarize_sweep(out_dir, window: int = 100, write: bool = True) -> list[dict]:
    """Reduce the cell CSVs to one row per cell.

    ``grad_improvement`` is the relative increase of the summed actor
    gradient (weight + bias, all epochs) over the variant's baseline run;
    ``best`` marks the largest improvement per variant.
    """
    out = Path(out_dir)
    rows = []
    for path in sorted((out / "cells").glob("*.csv")):
        if path.name.endswith(".timing.csv"):
            continue
        match = _CELL_RE.match(path.stem)
        if match is None:
            continue
        variant = match["variant"]
        row = {"variant": variant, "m": float(match["m"]), "eta": float(match["eta"]),
               "status": "FAILED", "epochs": 0, "convergence_epoch": None,
               "plateau_sum_rate": None, "actor_grad_weight_sum": None,
               "actor_grad_bias_sum": None, "grad_improvement": None, "best": 0}
        try:
            run = read_metrics(path)
        except ValueError:
            rows.append(row)
            continue
        gw, gb = _grad_sum(run)
        row.update(status="FAILED" if run.failed else "ok", epochs=len(run),
                   convergence_epoch=None if run.failed else convergence_epoch(run["sum_rate"], window),
                   plateau_sum_rate=plateau_mean(run["sum_rate"]),
                   actor_grad_weight_sum=gw, actor_grad_bias_sum=gb)
        base_path = out / "baselines" / f"{variant}.csv"
        if base_path.exists() and not run.failed:
            try:
                bw, bb = _grad_sum(read_metrics(base_path))
                if bw + bb > 0:
                    row["grad_improvement"] = (gw + gb - bw - bb) / (bw + bb)
            except ValueError:
                pass
        rows.append(row)

    for variant in sorted({r["variant"] for r in rows}):
        cand = [r for r in rows if r["variant"] == variant and r["grad_improvement"] is not None]
        if cand:
            max(cand, key=lambda r: r["grad_improvement"])["best"] = 1

    if write:
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in rows:
                w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                            for c in SUMMARY_COLUMNS])
    return rows
