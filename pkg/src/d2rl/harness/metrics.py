"""Metric CSV schema, reading and the curve statistics built on it.

Column order of the metrics CSV (one row per epoch)::

    epoch, status, sum_rate, reward, ma_reward, chi, substitutions,
    infeasible_actions, max_residual, warmup, critic_loss, actor_loss,
    senpnn_loss, actor_grad_weight, actor_grad_bias, critic_grad_weight,
    critic_grad_bias, reward_grad_weight, reward_grad_bias,
    actor_grad_weight_layers, actor_grad_bias_layers,
    critic_grad_weight_layers, critic_grad_bias_layers

``status`` is ``ok`` for a completed epoch and ``FAILED`` on the marker row
written when a run diverges. Per-layer gradient sums are ``;``-joined so
the column set never depends on network depth. Wall-clock times live in a
sidecar ``<stem>.timing.csv`` (``epoch, epoch_time, total_time``) so the
metrics file is byte-identical across repeated runs with one seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..trainer import MetricRecord

__all__ = [
    "COLUMNS",
    "TIMING_COLUMNS",
    "MissingColumnsError",
    "RunMetrics",
    "format_row",
    "failure_row",
    "timing_path",
    "read_metrics",
    "read_timing",
    "smooth",
    "convergence_epoch",
    "plateau_mean",
    "coefficient_of_variation",
]

COLUMNS = (
    "epoch", "status", "sum_rate", "reward", "ma_reward", "chi", "substitutions",
    "infeasible_actions", "max_residual", "warmup", "critic_loss", "actor_loss",
    "senpnn_loss", "actor_grad_weight", "actor_grad_bias", "critic_grad_weight",
    "critic_grad_bias", "reward_grad_weight", "reward_grad_bias",
    "actor_grad_weight_layers", "actor_grad_bias_layers",
    "critic_grad_weight_layers", "critic_grad_bias_layers",
)
TIMING_COLUMNS = ("epoch", "epoch_time", "total_time")
_LAYER_COLUMNS = COLUMNS[-4:]
_TAIL_FRACTION = 0.2


class MissingColumnsError(ValueError):
    """A CSV lacks columns that an operation needs."""

    def __init__(self, path, missing):
        self.missing = tuple(missing)
        super().__init__(f"{path}: missing column(s) {', '.join(self.missing)}")


def _num(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


def _layers(values) -> str:
    return ";".join(_num(v) for v in values)


def format_row(rec: MetricRecord) -> list[str]:
    return [
        str(rec.epoch), "ok", _num(rec.sum_rate), _num(rec.reward), _num(rec.ma_reward),
        _num(rec.chi), str(rec.substitutions), str(rec.infeasible_actions),
        _num(rec.max_residual), str(int(rec.warmup)), _num(rec.critic_loss),
        _num(rec.actor_loss), _num(rec.senpnn_loss),
        _num(rec.actor_grad.weight_total), _num(rec.actor_grad.bias_total),
        _num(rec.critic_grad.weight_total), _num(rec.critic_grad.bias_total),
        _num(rec.reward_grad.weight_total), _num(rec.reward_grad.bias_total),
        _layers(rec.actor_grad.weight), _layers(rec.actor_grad.bias),
        _layers(rec.critic_grad.weight), _layers(rec.critic_grad.bias),
    ]


def failure_row(epoch: int) -> list[str]:
    return [str(epoch), "FAILED"] + [""] * (len(COLUMNS) - 2)


def timing_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".timing.csv")


@dataclass
class RunMetrics:
    """Parsed metrics CSV. ``failed`` is set when a marker row is present."""

    path: Path
    columns: dict[str, np.ndarray]
    layers: dict[str, np.ndarray]
    failed: bool

    def __len__(self) -> int:
        return len(self.columns["epoch"])

    def __getitem__(self, key: str) -> np.ndarray:
        if key in self.layers:
            return self.layers[key]
        return self.columns[key]


def _read_rows(path, required) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    missing = [c for c in required if c not in header]
    if missing:
        raise MissingColumnsError(path, missing)
    return header, body


def read_metrics(path, required=COLUMNS) -> RunMetrics:
    """Parse a metrics CSV written by :func:`run_experiment`.

    Raises ``ValueError`` for an empty file or a file without data rows and
    :class:`MissingColumnsError` naming any absent ``required`` column.
    """
    header, body = _read_rows(path, required)
    failed = any(r[header.index("status")] == "FAILED" for r in body) if "status" in header else False
    if "status" in header:
        body = [r for r in body if r[header.index("status")] != "FAILED"]
    if not body:
        raise ValueError(f"{path}: no data rows")
    columns: dict[str, np.ndarray] = {}
    layers: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in body]
        if name == "status":
            continue
        if name in _LAYER_COLUMNS:
            layers[name] = _layer_matrix(vals)
        else:
            columns[name] = np.array([float(v) for v in vals])
    return RunMetrics(Path(path), columns, layers, failed)


def _layer_matrix(cells) -> np.ndarray:
    # epochs without an update (warmup) leave the cell empty; pad with NaN
    rows = [[float(v) for v in c.split(";")] if c else [] for c in cells]
    out = np.full((len(rows), max(map(len, rows))), np.nan)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def read_timing(csv_path) -> dict[str, np.ndarray]:
    """Timing sidecar of a metrics CSV as arrays keyed by column."""
    header, body = _read_rows(timing_path(csv_path), TIMING_COLUMNS)
    if not body:
        raise ValueError(f"{timing_path(csv_path)}: no data rows")
    return {name: np.array([float(r[j]) for r in body]) for j, name in enumerate(header)}


def smooth(x, window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average
    whatever history exists, matching the MA reward logged per epoch."""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plateau_mean(x, tail_fraction: float = _TAIL_FRACTION) -> float:
    """Mean over the last ``tail_fraction`` of the curve (at least one point)."""
    x = np.asarray(x, dtype=float)
    n_tail = max(1, int(math.ceil(tail_fraction * len(x))))
    return float(np.mean(x[-n_tail:]))


def convergence_epoch(sum_rate, window: int, level: float = 0.95,
                      tail_fraction: float = _TAIL_FRACTION) -> int | None:
    """First epoch whose full trailing-window mean reaches ``level`` times
    the plateau mean. ``None`` if the curve is shorter than the window or
    never gets there.
    """
    x = np.asarray(sum_rate, dtype=float)
    if len(x) < window or len(x) == 0:
        return None
    target = level * plateau_mean(x, tail_fraction)
    c = np.concatenate([[0.0], np.cumsum(x)])
    means = (c[window:] - c[:-window]) / window
    # tolerate summation rounding so rescaled curves pick the same epoch
    hit = np.nonzero(means >= target - 1e-12 * abs(target))[0]
    return int(hit[0] + window - 1) if len(hit) else None


def coefficient_of_variation(x, window: int, tail_fraction: float = _TAIL_FRACTION) -> float:
    """Std / mean of the trailing-window curve over the last ``tail_fraction``."""
    s = smooth(x, window)
    n_tail = max(1, int(math.ceil(tail_fraction * len(s))))
    tail = s[-n_tail:]
    return float(np.std(tail) / np.mean(tail))
