"""Double-critic actor-critic agent with a diffusion (or plain MLP) actor,
replay memory, soft target updates, and the diffusion-based state
substitution controller.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as wenv
from .gdm import (DiffusionSchedule, NoisePredictor, denoise_train_step, make_schedule,
                  mode1_policy_grad_step, mode2_generate, sample_chain)
from .numerics import DivergenceError, GradReport, Mlp

__all__ = [
    "AgentConfig",
    "Transition",
    "ReplayBuffer",
    "CriticPair",
    "StateExplorationConfig",
    "StateExplorer",
    "D2RLAgent",
    "soft_update",
    "critic_target",
    "min_q_with_grad",
]


@dataclass
class AgentConfig:
    hidden_width: int = 256
    actor_hidden_layers: int = 4
    critic_hidden_layers: int = 2
    senpnn_hidden_layers: int = 4
    lr_actor: float = 5e-5
    lr_critic: float = 3e-4
    lr_senpnn: float = 1e-4
    weight_decay: float = 7e-5
    tau: float = 5e-3
    gamma: float = 1.0
    diffusion_steps: int = 6
    beta_min: float = 1e-4
    beta_max: float = 0.2
    batch_size: int = 256
    buffer_size: int = 100_000
    epsilon: float = 0.1
    gdm_actor: bool = True
    updates_per_epoch: int = 1
    senpnn_batch: int = 64

    def hidden(self, n_layers: int) -> list[int]:
        return [self.hidden_width] * n_layers


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray  # executed action features, see env.action_features
    next_state: np.ndarray
    reward: float
    done: bool = False
    sum_rate: float = 0.0  # true objective, kept for reward learning
    bound: float = 0.0  # rate upper bound of the underlying channel state


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored in preallocated arrays."""

    def __init__(self, capacity: int, state_width: int, action_width: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_width))
        self.actions = np.zeros((capacity, action_width))
        self.next_states = np.zeros((capacity, state_width))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.sum_rates = np.zeros(capacity)
        self.bounds = np.zeros(capacity)
        self.count = 0
        self._head = 0

    def __len__(self) -> int:
        return self.count

    def add(self, tr: Transition) -> None:
        if not np.isfinite(tr.reward):
            raise ValueError("non-finite reward")
        i = self._head
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.next_states[i] = tr.next_state
        self.rewards[i] = tr.reward
        self.dones[i] = tr.done
        self.sum_rates[i] = tr.sum_rate
        self.bounds[i] = tr.bound
        self._head = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def ordered_indices(self) -> np.ndarray:
        """Indices from oldest to newest."""
        if self.count < self.capacity:
            return np.arange(self.count)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform batch, without replacement inside the batch."""
        if batch_size > self.count:
            raise ValueError(f"batch of {batch_size} requested from {self.count} transitions")
        idx = rng.choice(self.count, size=batch_size, replace=False)
        return {
            "state": self.states[idx],
            "action": self.actions[idx],
            "next_state": self.next_states[idx],
            "reward": self.rewards[idx],
            "done": self.dones[idx],
            "sum_rate": self.sum_rates[idx],
            "bound": self.bounds[idx],
        }


def soft_update(online: Mlp, target: Mlp, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target`` in place."""
    if online.widths != target.widths:
        raise ValueError("online and target architectures differ")
    for p, t in zip(online.parameters(), target.parameters()):
        t[...] = tau * p + (1.0 - tau) * t


class CriticPair:
    """Two independent Q networks on ``[state, action features]`` and
    their target copies."""

    def __init__(self, in_width: int, hidden, rng: np.random.Generator):
        self.q1 = Mlp([in_width, *hidden, 1], rng)
        self.q2 = Mlp([in_width, *hidden, 1], rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()

    def online(self) -> tuple[Mlp, Mlp]:
        return self.q1, self.q2

    def targets(self) -> tuple[Mlp, Mlp]:
        return self.q1_target, self.q2_target


def min_q_with_grad(q1: Mlp, q2: Mlp, state: np.ndarray, feats: np.ndarray):
    """Elementwise ``min(Q1, Q2)`` and its gradient w.r.t. the action features.

    Critic parameter gradients are left untouched.
    """
    x = np.concatenate([state, feats], axis=1)
    a = q1.forward(x, record=True)[:, 0]
    b = q2.forward(x, record=True)[:, 0]
    pick_first = a <= b
    n = x.shape[0]
    g2 = q2.backward(np.where(pick_first, 0.0, 1.0)[:, None], accumulate=False)
    g1 = q1.backward(np.where(pick_first, 1.0, 0.0)[:, None], accumulate=False)
    sw = state.shape[1]
    return np.minimum(a, b), (g1 + g2)[:, sw:], pick_first


def critic_target(batch: dict, q1_target: Mlp, q2_target: Mlp, next_feats: np.ndarray,
                  gamma: float) -> np.ndarray:
    """``y = r + gamma * (1 - done) * min(Q1', Q2')(s', a')``."""
    x = np.concatenate([batch["next_state"], next_feats], axis=1)
    q_next = np.minimum(q1_target(x)[:, 0], q2_target(x)[:, 0])
    live = 1.0 - batch["done"].astype(float)
    return batch["reward"] + gamma * live * q_next


# -- state exploration ---------------------------------------------------------

@dataclass
class StateExplorationConfig:
    """Substitute-probability controller. ``chi`` starts at 0 and grows by
    ``eta`` (capped at ``max_prob``) whenever the tracked loss is below
    ``threshold``."""

    eta: float = 0.001
    max_prob: float = 0.9
    threshold: float = 5e-4
    chi: float = 0.0
    ema_decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.max_prob <= 1.0:
            raise ValueError("max_prob must lie in [0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 <= self.chi <= self.max_prob:
            raise ValueError("chi must lie in [0, max_prob]")


class StateExplorer:
    """Mode II state generator plus the substitution rule."""

    def __init__(self, cfg: StateExplorationConfig, senpnn: NoisePredictor,
                 sched: DiffusionSchedule):
        self.cfg = cfg
        self.senpnn = senpnn
        self.sched = sched
        self.ema_loss = float("inf")
        self.chi_history: list[float] = []

    def observe_loss(self, loss: float) -> None:
        d = self.cfg.ema_decay
        self.ema_loss = loss if not np.isfinite(self.ema_loss) else d * self.ema_loss + (1 - d) * loss

    def train(self, states: np.ndarray, rng: np.random.Generator, learning_rate: float,
              weight_decay: float = 0.0) -> tuple[float, GradReport]:
        loss, report = denoise_train_step(states, None, self.senpnn, self.sched, rng,
                                          learning_rate, weight_decay)
        self.observe_loss(loss)
        return loss, report

    def update_chi(self) -> float:
        if self.ema_loss < self.cfg.threshold:
            self.cfg.chi = min(self.cfg.chi + self.cfg.eta, self.cfg.max_prob)
        self.chi_history.append(self.cfg.chi)
        return self.cfg.chi

    def generate(self, s0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return mode2_generate(s0, None, self.senpnn, self.sched, rng)[0]

    def substitute(self, s0: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        """Return ``(state, substituted)``.

        The Mode II sample is only generated when it is actually used; the
        substitution draw happens first so the decision does not depend on it.
        """
        chi = self.update_chi()
        r = rng.uniform()
        if chi > 0.0 and r <= chi:
            return self.generate(s0, rng), True
        return s0, False


# -- agent --------------------------------------------------------------------

class D2RLAgent:
    """Actor (diffusion or MLP), double critic, targets and replay.

    Parameters
    ----------
    cfg : AgentConfig
    env_cfg : wenv.EnvConfig
        Fixes the state and action widths.
    rng : numpy.random.Generator
        Used for initialisation only; runtime randomness is passed per call.
    """

    def __init__(self, cfg: AgentConfig, env_cfg: wenv.EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.state_width = wenv.state_width(env_cfg)
        self.action_width = wenv.action_width(env_cfg)
        self.sched = make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        hidden = cfg.hidden(cfg.actor_hidden_layers)
        if cfg.gdm_actor:
            self.actor = NoisePredictor(self.action_width, self.state_width, hidden, rng,
                                        n_steps=cfg.diffusion_steps)
            self.actor_target = NoisePredictor.__new__(NoisePredictor)
            self.actor_target.__dict__.update(self.actor.__dict__)
            self.actor_target.net = self.actor.net.copy()
        else:
            self.actor = Mlp([self.state_width, *hidden, self.action_width], rng)
            self.actor_target = self.actor.copy()
        self.critics = CriticPair(self.state_width + self.action_width,
                                  cfg.hidden(cfg.critic_hidden_layers), rng)
        self.buffer = ReplayBuffer(cfg.buffer_size, self.state_width, self.action_width)

    # -- acting ----------------------------------------------------------
    @property
    def actor_net(self) -> Mlp:
        return self.actor.net if self.cfg.gdm_actor else self.actor

    @property
    def actor_target_net(self) -> Mlp:
        return self.actor_target.net if self.cfg.gdm_actor else self.actor_target

    def policy_raw(self, states: np.ndarray, rng: np.random.Generator, target: bool = False,
                   record: bool = False) -> np.ndarray:
        states = np.atleast_2d(states)
        net = self.actor_target if target else self.actor
        if self.cfg.gdm_actor:
            return sample_chain(states, net, self.sched, rng, record=record)
        return net.forward(states, record=record)

    def select_action(self, state: np.ndarray, rng: np.random.Generator, explore: bool = True):
        """Return ``(raw, action, features)`` for one encoded state.

        With probability ``epsilon`` (when exploring) the raw vector is drawn
        uniformly from ``[-1, 1]`` instead of from the actor.
        """
        if explore and rng.uniform() < self.cfg.epsilon:
            raw = rng.uniform(-1.0, 1.0, size=self.action_width)
        else:
            raw = self.policy_raw(state, rng)[0]
        action = wenv.project_action(raw, self.env_cfg)
        feats, _ = wenv.action_features(raw, self.env_cfg)
        return raw, action, feats[0]

    # -- learning ----------------------------------------------------------
    def critic_targets(self, batch: dict, rng: np.random.Generator) -> np.ndarray:
        raw_next = self.policy_raw(batch["next_state"], rng, target=True)
        next_feats, _ = wenv.action_features(raw_next, self.env_cfg)
        return critic_target(batch, *self.critics.targets(), next_feats, self.cfg.gamma)

    def critic_update(self, batch: dict, targets: np.ndarray):
        """One MSE regression step per critic. Returns losses and reports."""
        x = np.concatenate([batch["state"], batch["action"]], axis=1)
        losses, reports = [], []
        for q in self.critics.online():
            q.zero_grad()
            pred = q.forward(x, record=True)[:, 0]
            err = pred - targets
            loss = float(np.mean(err ** 2))
            if not np.isfinite(loss):
                q.clear_tape()
                raise DivergenceError("non-finite critic loss")
            q.backward((2.0 * err / len(err))[:, None])
            reports.append(q.grad_report())
            q.adam_step(self.cfg.lr_critic, self.cfg.weight_decay)
            losses.append(loss)
        return losses, reports

    def _critic_hook(self, states: np.ndarray):
        q1, q2 = self.critics.online()

        def hook(raw):
            feats, cache = wenv.action_features(raw, self.env_cfg)
            q, gfeat, _ = min_q_with_grad(q1, q2, states, feats)
            return q, wenv.action_features_backward(gfeat, cache, self.env_cfg)

        return hook

    def actor_update(self, batch: dict, rng: np.random.Generator) -> tuple[float, GradReport]:
        states = batch["state"]
        hook = self._critic_hook(states)
        if self.cfg.gdm_actor:
            loss, report, _ = mode1_policy_grad_step(states, self.actor, self.sched, hook, rng,
                                                     self.cfg.lr_actor, self.cfg.weight_decay)
            return loss, report
        net = self.actor
        net.zero_grad()
        raw = net.forward(states, record=True)
        q, graw = hook(raw)
        loss = -float(np.mean(q))
        if not np.isfinite(loss):
            net.clear_tape()
            raise DivergenceError("non-finite actor objective")
        net.backward(-graw / len(q))
        report = net.grad_report()
        net.adam_step(self.cfg.lr_actor, self.cfg.weight_decay)
        return loss, report

    def soft_update_targets(self) -> None:
        tau = self.cfg.tau
        soft_update(self.actor_net, self.actor_target_net, tau)
        for online, target in zip(self.critics.online(), self.critics.targets()):
            soft_update(online, target, tau)

    # -- checkpointing ---------------------------------------------------------
    def networks(self) -> dict[str, Mlp]:
        return {
            "actor": self.actor_net,
            "actor_target": self.actor_target_net,
            "q1": self.critics.q1,
            "q2": self.critics.q2,
            "q1_target": self.critics.q1_target,
            "q2_target": self.critics.q2_target,
        }
