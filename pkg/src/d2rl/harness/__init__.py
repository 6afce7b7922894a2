"""Experiment orchestration: single runs, sweeps, ablations, plots, reports."""
from .ablation import ARMS, ablation_checks, run_ablation
from .experiment import RunResult, run_experiment
from .metrics import (COLUMNS, MissingColumnsError, convergence_epoch, read_metrics, read_timing,
                      smooth)
from .plots import emit_plots
from .report import Comparison, compare_report
from .sweep import run_sweep, summarize_sweep

__all__ = [
    "ARMS", "COLUMNS", "Comparison", "MissingColumnsError", "RunResult", "ablation_checks",
    "compare_report", "convergence_epoch", "emit_plots", "read_metrics", "read_timing",
    "run_ablation", "run_experiment", "run_sweep", "smooth", "summarize_sweep",
]
