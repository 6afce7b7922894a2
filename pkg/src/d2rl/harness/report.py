"""Baseline-versus-variant comparison of two runs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import convergence_epoch, plateau_mean, read_metrics, read_timing

__all__ = ["Comparison", "compare_report"]


@dataclass
class Comparison:
    """Variant relative to baseline. Ratios are ``variant / baseline``;
    ``None`` means not available (a run did not converge)."""

    baseline: str
    variant: str
    baseline_convergence: int | None
    variant_convergence: int | None
    convergence_ratio: float | None
    total_time_ratio: float | None
    per_epoch_time_ratio: float | None
    final_sum_rate_delta: float

    def to_markdown(self) -> str:
        def fmt(x, spec=".4f"):
            return "N/A" if x is None else format(x, spec)

        def conv(c):
            return "not converged" if c is None else str(c)

        rows = [
            ("convergence epoch (baseline)", conv(self.baseline_convergence)),
            ("convergence epoch (variant)", conv(self.variant_convergence)),
            ("convergence-epoch ratio", fmt(self.convergence_ratio)),
            ("total-time ratio", fmt(self.total_time_ratio)),
            ("per-epoch-time ratio", fmt(self.per_epoch_time_ratio)),
            ("final sum-rate delta (bits/s/Hz)", fmt(self.final_sum_rate_delta, "+.4f")),
        ]
        lines = [f"# {self.variant} vs {self.baseline}", "", "| metric | value |", "|---|---|"]
        lines += [f"| {k} | {v} |" for k, v in rows]
        return "\n".join(lines) + "\n"


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return float(a / b)


def compare_report(baseline_csv, variant_csv, window: int = 100) -> Comparison:
    """Compare two runs.

    The convergence ratio compares epochs-to-converge (detected epoch + 1).
    The total-time ratio compares cumulative wall time at convergence, the
    per-epoch ratio compares mean epoch wall time (from timing sidecars),
    and the delta is the difference of plateau sum rates.
    """
    base, var = read_metrics(baseline_csv), read_metrics(variant_csv)
    cb = None if base.failed else convergence_epoch(base["sum_rate"], window)
    cv = None if var.failed else convergence_epoch(var["sum_rate"], window)
    tb, tv = read_timing(baseline_csv), read_timing(variant_csv)

    conv_ratio = total_ratio = None
    if cb is not None and cv is not None:
        conv_ratio = _ratio(cv + 1, cb + 1)
        total_ratio = _ratio(tv["total_time"][cv], tb["total_time"][cb])
    per_epoch = _ratio(float(np.mean(tv["epoch_time"])), float(np.mean(tb["epoch_time"])))
    delta = plateau_mean(var["sum_rate"]) - plateau_mean(base["sum_rate"])
    return Comparison(Path(baseline_csv).stem, Path(variant_csv).stem, cb, cv, conv_ratio,
                      total_ratio, per_epoch, float(delta))
