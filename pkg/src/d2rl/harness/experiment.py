"""Single training run: metrics CSV, timing sidecar and checkpoint."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

from ..config import ExperimentConfig, dump_config
from ..numerics import DivergenceError
from ..trainer import Trainer, save_checkpoint
from .metrics import COLUMNS, TIMING_COLUMNS, convergence_epoch, failure_row, format_row, timing_path

__all__ = ["RunResult", "run_experiment"]

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    csv_path: Path
    timing_path: Path
    checkpoint_path: Path | None
    epochs_completed: int
    failed: bool
    convergence_epoch: int | None
    final_sum_rate: float | None


def run_experiment(cfg: ExperimentConfig, out_dir, name: str = "run",
                   checkpoint: bool = True) -> RunResult:
    """Train for ``cfg.epochs`` epochs and write ``<name>.csv``,
    ``<name>.timing.csv``, ``<name>.cfg`` and ``<name>.npz`` under ``out_dir``.

    Rows are flushed every epoch. On divergence the CSV ends with a
    ``FAILED`` marker row, no checkpoint is written and the result has
    ``failed=True``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    tpath = timing_path(csv_path)
    (out / f"{name}.cfg").write_text(dump_config(cfg), encoding="utf-8")

    trainer = Trainer(cfg)
    rates: list[float] = []
    failed = False
    with open(csv_path, "w", newline="", encoding="utf-8") as fm, \
            open(tpath, "w", newline="", encoding="utf-8") as ft:
        wm, wt = csv.writer(fm, lineterminator="\n"), csv.writer(ft, lineterminator="\n")
        wm.writerow(COLUMNS)
        wt.writerow(TIMING_COLUMNS)
        for _ in range(cfg.epochs):
            try:
                rec = trainer.train_epoch()
            except (DivergenceError, FloatingPointError) as exc:
                log.warning("run %s diverged at epoch %d: %s", name, trainer.epoch, exc)
                wm.writerow(failure_row(trainer.epoch))
                failed = True
                break
            wm.writerow(format_row(rec))
            wt.writerow([rec.epoch, repr(rec.epoch_time), repr(rec.total_time)])
            fm.flush()
            ft.flush()
            rates.append(rec.sum_rate)

    ckpt = None
    if checkpoint and not failed:
        ckpt = save_checkpoint(out / f"{name}.npz", trainer)
    conv = None if failed else convergence_epoch(rates, cfg.ma_window)
    final = float(rates[-1]) if rates else None
    return RunResult(csv_path, tpath, ckpt, len(rates), failed, conv, final)
