"""Ablation suite: actor type, reward design and state exploration.

Arms (all share one base config and seed):

========== =========================================================
arm        settings
========== =========================================================
raw        raw reward, diffusion actor
designed   designed reward, diffusion actor
designed_mlp, gdm, designed_gdm
           the learned reward variants, diffusion actor
mlp_actor  designed reward, plain MLP actor
designed_se
           designed reward, diffusion actor, state exploration on
========== =========================================================

A run that never converges counts as converging at ``epochs`` (after
every finite one).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..config import ExperimentConfig
from ..rewards import VARIANTS
from .experiment import run_experiment
from .metrics import convergence_epoch, read_metrics

__all__ = ["ARMS", "AblationResult", "arm_config", "run_ablation", "ablation_checks"]

ARMS = (*VARIANTS, "mlp_actor", "designed_se")


def arm_config(base: ExperimentConfig, arm: str, seed: int, se_max_prob: float = 0.9,
               se_eta: float = 0.001) -> ExperimentConfig:
    if arm in VARIANTS:
        return base.replace(reward_variant=arm, gdm_actor=True, state_exploration=False, seed=seed)
    if arm == "mlp_actor":
        return base.replace(reward_variant="designed", gdm_actor=False, state_exploration=False,
                            seed=seed)
    if arm == "designed_se":
        return base.replace(reward_variant="designed", gdm_actor=True, state_exploration=True,
                            se_max_prob=se_max_prob, se_eta=se_eta, seed=seed)
    raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")


@dataclass
class AblationResult:
    epochs: int
    # convergence[arm][seed] -> epoch, or None if the run never converged
    convergence: dict[str, dict[int, int | None]] = field(default_factory=dict)

    def effective(self, arm: str, seed: int) -> int:
        c = self.convergence[arm][seed]
        return self.epochs if c is None else c

    @property
    def seeds(self) -> list[int]:
        return sorted(next(iter(self.convergence.values())))


def run_ablation(base: ExperimentConfig, seeds, out_dir, arms=ARMS, **se) -> AblationResult:
    """Run every arm for every seed, reusing CSVs already present in
    ``out_dir`` (delete them to force a rerun)."""
    out = Path(out_dir)
    res = AblationResult(epochs=base.epochs)
    for arm in arms:
        res.convergence[arm] = {}
        for seed in seeds:
            name = f"{arm}__seed{seed}"
            path = out / f"{name}.csv"
            if not path.exists():
                run_experiment(arm_config(base, arm, seed, **se), out, name=name, checkpoint=False)
            run = read_metrics(path)
            res.convergence[arm][seed] = (None if run.failed
                                          else convergence_epoch(run["sum_rate"], base.ma_window))
    return res


def ablation_checks(res: AblationResult, min_seeds: int = 2) -> dict[str, tuple[bool, list[bool]]]:
    """Per-comparison ``(passed, per-seed outcomes)``; pass needs the
    ordering on at least ``min_seeds`` seeds."""
    e = res.effective
    others = [v for v in VARIANTS if v != "designed_gdm"]
    tests = {
        "gdm_actor_faster_than_mlp_actor": lambda s: e("designed", s) < e("mlp_actor", s),
        "designed_faster_than_raw": lambda s: e("designed", s) < e("raw", s),
        "designed_gdm_fastest_reward": lambda s: all(e("designed_gdm", s) < e(v, s) for v in others),
        "state_exploration_faster": lambda s: e("designed_se", s) < e("designed", s),
    }
    out = {}
    for name, fn in tests.items():
        per_seed = [bool(fn(s)) for s in res.seeds]
        out[name] = (sum(per_seed) >= min_seeds, per_seed)
    return out
