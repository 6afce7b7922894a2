"""Static figures from metric CSVs.

Four files per call: ``sum_rate.png`` (raw curves with trailing-mean
overlay), ``ma_reward.png``, ``gradients.png`` (per-layer actor gradient
weight and bias sums) and ``time.png`` (total and per-epoch wall time).
PNG metadata is stripped so identical inputs give identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_metrics, read_timing, smooth  # noqa: E402

__all__ = ["PLOT_FILES", "emit_plots"]

PLOT_FILES = ("sum_rate.png", "ma_reward.png", "gradients.png", "time.png")
_REQUIRED = ("epoch", "sum_rate", "ma_reward", "actor_grad_weight_layers", "actor_grad_bias_layers")
_STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _layer_sums(run) -> tuple[np.ndarray, np.ndarray]:
    w, b = run["actor_grad_weight_layers"], run["actor_grad_bias_layers"]
    if w.ndim != 2 or w.shape[1] == 0:
        return np.zeros(0), np.zeros(0)
    return w.sum(axis=0), b.sum(axis=0)


def _bars(ax, groups: list[np.ndarray], labels: list[str], ylabel: str) -> None:
    n_layers = max((len(g) for g in groups), default=0)
    width = 0.8 / max(len(groups), 1)
    x = np.arange(n_layers)
    for i, (g, lab) in enumerate(zip(groups, labels)):
        vals = np.zeros(n_layers)
        vals[:len(g)] = g
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=lab)
    ax.set_xticks(x, [f"L{j + 1}" for j in x])
    ax.set_ylabel(ylabel)


def emit_plots(csv_paths, out_dir, window: int = 100, labels=None) -> list[Path]:
    """Render the four figure files for a set of runs.

    Every input is parsed before anything is written, so a bad input
    leaves no partial output. ``window`` is the trailing-mean window of
    the sum-rate overlay and should equal the run's ``ma_window``.
    """
    paths = [Path(p) for p in csv_paths]
    if not paths:
        raise ValueError("no CSV files given")
    runs = [read_metrics(p, required=_REQUIRED) for p in paths]
    times = [read_timing(p) for p in paths]
    labels = list(labels) if labels is not None else [p.stem for p in paths]
    if len(labels) != len(paths):
        raise ValueError("one label per CSV required")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for run, lab in zip(runs, labels):
            (line,) = ax.plot(run["epoch"], run["sum_rate"], alpha=0.25, linewidth=0.6)
            ax.plot(run["epoch"], smooth(run["sum_rate"], window), color=line.get_color(), label=lab)
        ax.set_xlabel("epoch")
        ax.set_ylabel("sum rate (bits/s/Hz)")
        ax.legend()
        written.append(_save(fig, out / PLOT_FILES[0]))

        fig, ax = plt.subplots()
        for run, lab in zip(runs, labels):
            ax.plot(run["epoch"], run["ma_reward"], label=lab)
        ax.set_xlabel("epoch")
        ax.set_ylabel("MA reward")
        ax.legend()
        written.append(_save(fig, out / PLOT_FILES[1]))

        fig, (aw, ab) = plt.subplots(1, 2, figsize=(9.6, 4.0))
        sums = [_layer_sums(r) for r in runs]
        _bars(aw, [s[0] for s in sums], labels, "gradient weight sum")
        _bars(ab, [s[1] for s in sums], labels, "gradient bias sum")
        aw.legend()
        fig.tight_layout()
        written.append(_save(fig, out / PLOT_FILES[2]))

        fig, (at, ae) = plt.subplots(1, 2, figsize=(9.6, 4.0))
        x = np.arange(len(runs))
        at.bar(x, [t["total_time"][-1] for t in times])
        ae.bar(x, [float(np.mean(t["epoch_time"])) for t in times])
        for a, lab in ((at, "total time (s)"), (ae, "time per epoch (s)")):
            a.set_xticks(x, labels, rotation=20, ha="right")
            a.set_ylabel(lab)
        fig.tight_layout()
        written.append(_save(fig, out / PLOT_FILES[3]))
    return written
