"""Epoch loop: collect ``T`` interactions, then optimise from replay.

Episodes (user drops) last ``episode_length`` steps and run across epoch
boundaries when ``T`` is not a multiple of it.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as wenv
from .agent import D2RLAgent, StateExplorer, Transition
from .config import ExperimentConfig, dump_config
from .gdm import NoisePredictor
from .numerics import GradReport
from .rewards import RewardModel, upper_bound

__all__ = ["MetricRecord", "Trainer", "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION"]

CHECKPOINT_VERSION = 1


@dataclass
class MetricRecord:
    epoch: int
    sum_rate: float
    reward: float
    ma_reward: float = 0.0
    chi: float = 0.0
    substitutions: int = 0
    infeasible_actions: int = 0
    max_residual: float = 0.0
    warmup: bool = False
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    senpnn_loss: float = float("nan")
    actor_grad: GradReport = field(default_factory=GradReport)
    critic_grad: GradReport = field(default_factory=GradReport)
    reward_grad: GradReport = field(default_factory=GradReport)
    epoch_time: float = 0.0
    total_time: float = 0.0


def _mean_reports(reports: list[GradReport], n_layers: int) -> GradReport:
    if not reports:
        return GradReport([0.0] * n_layers, [0.0] * n_layers)
    w = np.mean([r.weight for r in reports], axis=0)
    b = np.mean([r.bias for r in reports], axis=0)
    return GradReport([float(x) for x in w], [float(x) for x in b])


def _sum_reports(a: GradReport, b: GradReport) -> GradReport:
    return GradReport([x + y for x, y in zip(a.weight, b.weight)],
                      [x + y for x, y in zip(a.bias, b.bias)])


class Trainer:
    """Owns the environment, agent, reward design and state explorer of one run.

    All randomness after construction flows from ``self.rng``, except the
    learned reward networks, which draw from their own ``reward_rng`` so
    that reward designs sharing a seed see the same trajectory until their
    rewards diverge.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.reward_rng = np.random.default_rng([cfg.seed, 2])
        init_rng = np.random.default_rng([cfg.seed, 1])
        self.env_cfg = cfg.env_config()
        self.env = wenv.WirelessEnv(self.env_cfg, self.rng)
        self.agent = D2RLAgent(cfg.agent_config(), self.env_cfg, init_rng)
        self.reward = RewardModel(cfg.reward_config(), self.env_cfg, self.agent.sched, init_rng)
        self.explorer: StateExplorer | None = None
        if cfg.state_exploration:
            senpnn = NoisePredictor(self.agent.state_width, 0,
                                    [cfg.hidden_width] * cfg.senpnn_hidden_layers, init_rng,
                                    n_steps=cfg.diffusion_steps)
            self.explorer = StateExplorer(cfg.exploration_config(), senpnn, self.agent.sched)
        # raw environment states seen so far, the state generator's training set
        self._state_pool = np.zeros((min(cfg.buffer_size, 100_000), self.agent.state_width))
        self._pool_count = 0
        self._pool_head = 0
        self._state: wenv.ChannelState | None = None  # None: start a new episode
        self.epoch = 0
        self.total_time = 0.0
        self.rewards_history: list[float] = []
        self.min_rule_checks = 0

    @property
    def actor_layers(self) -> int:
        return self.agent.actor_net.n_layers

    def _remember_state(self, s: np.ndarray) -> None:
        self._state_pool[self._pool_head] = s
        self._pool_head = (self._pool_head + 1) % len(self._state_pool)
        self._pool_count = min(self._pool_count + 1, len(self._state_pool))

    def train_epoch(self) -> MetricRecord:
        cfg = self.cfg
        t0 = time.perf_counter()
        rates, rewards = [], []
        subs = infeasible = 0
        max_res = 0.0
        for _ in range(cfg.steps_per_epoch):
            if self._state is None:
                self._state = self.env.reset()
            state = self._state
            s0 = wenv.encode_state(state, self.env_cfg)
            self._remember_state(s0)
            s_t = s0
            if self.explorer is not None:
                s_t, substituted = self.explorer.substitute(s0, self.rng)
                subs += int(substituted)
            _, action, feats = self.agent.select_action(s_t, self.rng)
            residual = max(action.residuals(self.env_cfg))
            max_res = max(max_res, residual)
            if residual > wenv.FEASIBILITY_TOL:
                infeasible += 1
            bound = upper_bound(state, self.env_cfg)
            next_state, report, done = self.env.step(action)
            r = self.reward.emit(s_t, feats, report, bound, self.reward_rng)
            self.agent.buffer.add(Transition(
                s_t, feats, wenv.encode_state(next_state, self.env_cfg), r, done,
                report.sum_rate, bound))
            rates.append(report.sum_rate)
            rewards.append(r)
            self._state = None if done else next_state

        rec = MetricRecord(epoch=self.epoch, sum_rate=float(np.mean(rates)),
                           reward=float(np.mean(rewards)), substitutions=subs,
                           infeasible_actions=infeasible, max_residual=max_res)
        self._optimise(rec)
        if self.explorer is not None:
            idx = self.rng.integers(0, self._pool_count, size=min(cfg.senpnn_batch, self._pool_count))
            rec.senpnn_loss, _ = self.explorer.train(self._state_pool[idx], self.rng, cfg.lr_senpnn,
                                                     cfg.weight_decay)
            rec.chi = self.explorer.cfg.chi

        self.rewards_history.append(rec.reward)
        window = self.rewards_history[-cfg.ma_window:]
        rec.ma_reward = float(np.mean(window))
        rec.epoch_time = time.perf_counter() - t0
        self.total_time += rec.epoch_time
        rec.total_time = self.total_time
        self.epoch += 1
        return rec

    def _optimise(self, rec: MetricRecord) -> None:
        cfg = self.cfg
        agent = self.agent
        if len(agent.buffer) < cfg.batch_size:
            rec.warmup = True
            return
        actor_reports, critic_reports, reward_reports = [], [], []
        closs, aloss = [], []
        for _ in range(cfg.updates_per_epoch):
            batch = agent.buffer.sample(cfg.batch_size, self.rng)
            targets = agent.critic_targets(batch, self.rng)
            self.min_rule_checks += 1
            losses, reports = agent.critic_update(batch, targets)
            closs.append(float(np.mean(losses)))
            critic_reports.append(_sum_reports(*reports))
            loss, report = agent.actor_update(batch, self.rng)
            aloss.append(loss)
            actor_reports.append(report)
            rreport = self.reward.update(batch, self.reward_rng)
            if rreport is not None:
                reward_reports.append(rreport)
            agent.soft_update_targets()
        rec.critic_loss = float(np.mean(closs))
        rec.actor_loss = float(np.mean(aloss))
        rec.actor_grad = _mean_reports(actor_reports, self.actor_layers)
        rec.critic_grad = _mean_reports(critic_reports, cfg.critic_hidden_layers + 1)
        rec.reward_grad = _mean_reports(reward_reports, 0)

    def evaluate(self, n_states: int = 32, rng: np.random.Generator | None = None) -> float:
        """Mean sum rate of the greedy policy on fresh states (no exploration)."""
        rng = np.random.default_rng(12345) if rng is None else rng
        rates = []
        for _ in range(n_states):
            st = wenv.sample_channels(self.env_cfg, rng=rng)
            _, action, _ = self.agent.select_action(wenv.encode_state(st, self.env_cfg), rng,
                                                    explore=False)
            rates.append(wenv.sum_rate(st, action, self.env_cfg).sum_rate)
        return float(np.mean(rates))

    # -- checkpoint helpers ----------------------------------------------
    def networks(self) -> dict:
        nets = dict(self.agent.networks())
        nets.update(self.reward.networks())
        if self.explorer is not None:
            nets["senpnn"] = self.explorer.senpnn.net
        return nets


def save_checkpoint(path, trainer: Trainer) -> Path:
    """Write an ``.npz`` checkpoint.

    Layout: ``meta`` holds a JSON string with ``version``, ``epoch``,
    ``config`` (the config file text), ``rng`` and ``reward_rng`` (bit
    generator states),
    ``chi``, ``ema_loss`` and ``networks`` (ordered names). Each network
    ``name`` contributes ``name/widths``, ``name/step`` and
    ``name/param{i}``, ``name/adam_m{i}``, ``name/adam_v{i}`` for its
    parameters in ``W0, b0, W1, b1, ...`` order. Replay memory is not saved.
    """
    path = Path(path)
    nets = trainer.networks()
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": trainer.epoch,
        "config": dump_config(trainer.cfg),
        "rng": trainer.rng.bit_generator.state,
        "reward_rng": trainer.reward_rng.bit_generator.state,
        "networks": list(nets),
        "chi": trainer.explorer.cfg.chi if trainer.explorer else None,
        "ema_loss": trainer.explorer.ema_loss if trainer.explorer else None,
    }
    arrays = {"meta": np.asarray(json.dumps(meta, default=int))}
    for name, net in nets.items():
        arrays.update(net.state_dict(prefix=f"{name}/"))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, trainer: Trainer) -> None:
    """Restore networks, optimiser moments, rng and controller state in place."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        nets = trainer.networks()
        if list(nets) != meta["networks"]:
            raise ValueError("checkpoint networks do not match this configuration")
        state = {k: data[k] for k in data.files}
    for name, net in nets.items():
        net.load_state_dict(state, prefix=f"{name}/")
    trainer.rng.bit_generator.state = meta["rng"]
    trainer.reward_rng.bit_generator.state = meta["reward_rng"]
    trainer.epoch = meta["epoch"]
    if trainer.explorer is not None:
        trainer.explorer.cfg.chi = meta["chi"]
        trainer.explorer.ema_loss = float(meta["ema_loss"])
