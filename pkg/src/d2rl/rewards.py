"""Reward designs: raw sum rate, bound-referenced designed reward, and the
learned variants (MLP shaper, diffusion reward, designed + diffusion
residual).

Every learned reward is bounded by a soft clamp ``c * tanh(x / c)`` and is
trained to maximise ``E[r * z]`` where ``z`` is the batch-standardised
designed reward ``C - R'`` of the stored transitions. The reward networks
see the achieved sum rate ``C`` in their conditioning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as wenv
from .gdm import (DiffusionSchedule, NoisePredictor, chain_backward, draw_chain_noise,
                  null_chain, sample_chain)
from .numerics import DivergenceError, GradReport, Mlp

__all__ = [
    "VARIANTS",
    "RewardConfig",
    "RewardShaper",
    "RewardModel",
    "raw_reward",
    "upper_bound",
    "designed_reward",
    "mlp_shaped_reward",
    "gdm_reward",
    "gdm_residual",
    "designed_plus_gdm_reward",
    "soft_clamp",
]

VARIANTS = ("raw", "designed", "designed_mlp", "gdm", "designed_gdm")


def soft_clamp(x, c: float | None):
    if c is None:
        return x
    return c * np.tanh(np.asarray(x) / c)


def _soft_clamp_grad(x, c: float | None):
    if c is None:
        return np.ones_like(x)
    return 1.0 - np.tanh(np.asarray(x) / c) ** 2


def raw_reward(report: wenv.RateReport) -> float:
    return report.sum_rate


def upper_bound(state: wenv.ChannelState, cfg: wenv.EnvConfig) -> float:
    """Interference- and clutter-free single-user rates at full power.

    Each downlink user is served alone with ``P_max`` on a matched beam and
    each uplink user transmits ``P_l`` into a matched filter without any
    interference, so no feasible action can exceed the sum.
    """
    g2 = np.sum(np.abs(state.g) ** 2, axis=1)
    h2 = np.sum(np.abs(state.h) ** 2, axis=1)
    return float(np.sum(np.log2(1.0 + g2 * cfg.p_max / cfg.noise_dl))
                 + np.sum(np.log2(1.0 + h2 * cfg.p_ul / cfg.noise_ul)))


def designed_reward(report: wenv.RateReport, bound: float) -> float:
    return report.sum_rate - bound


class RewardShaper:
    """``f(z) = a^T z + b + g(z)``: a linear path plus a residual MLP ``g``
    whose output layer starts at zero.

    With ``passthrough=True`` the linear path initially copies the last
    input entry (the base reward) so the shaper starts as the identity on
    the base reward.
    """

    def __init__(self, in_width: int, hidden, rng: np.random.Generator, passthrough: bool = True):
        self.linear = Mlp([in_width, 1], rng, activation="linear")
        self.residual = Mlp([in_width, *hidden, 1], rng, zero_output=True)
        if passthrough:
            self.linear.weights[0][...] = 0.0
            self.linear.weights[0][-1, 0] = 1.0
            self.linear.biases[0][...] = 0.0

    @property
    def in_width(self) -> int:
        return self.linear.in_width

    def nets(self) -> tuple[Mlp, Mlp]:
        return self.linear, self.residual

    def __call__(self, z, record: bool = False) -> np.ndarray:
        return self.linear.forward(z, record=record) + self.residual.forward(z, record=record)

    def backward(self, grad_out) -> np.ndarray:
        return self.residual.backward(grad_out) + self.linear.backward(grad_out)

    def zero_grad(self) -> None:
        for net in self.nets():
            net.zero_grad()

    def adam_step(self, learning_rate: float, weight_decay: float = 0.0) -> None:
        for net in self.nets():
            net.adam_step(learning_rate, weight_decay)

    def grad_report(self) -> GradReport:
        lin, res = self.linear.grad_report(), self.residual.grad_report()
        return GradReport(weight=lin.weight + res.weight, bias=lin.bias + res.bias)


def _shaper_input(state, action, base) -> np.ndarray:
    state = np.atleast_2d(state)
    action = np.atleast_2d(action)
    base = np.asarray(base, dtype=float).reshape(-1, 1)
    return np.concatenate([state, action, base], axis=1)


def mlp_shaped_reward(state, action, base, shaper: RewardShaper, clamp: float | None = None):
    """Shaper output on ``[S, A, base]``.

    With ``clamp`` the deviation from ``base`` is soft-clamped to ``+-clamp``.
    Returns a float for a single transition, an array for a batch.
    """
    z = _shaper_input(state, action, base)
    if z.shape[1] != shaper.in_width:
        raise ValueError(f"shaper expects width {shaper.in_width}, got {z.shape[1]}")
    f = shaper(z)[:, 0]
    b = z[:, -1]
    out = b + soft_clamp(f - b, clamp) if clamp is not None else f
    return float(out[0]) if np.ndim(base) == 0 else out


def gdm_reward(state, action, renpnn: NoisePredictor, sched: DiffusionSchedule,
               rng: np.random.Generator, extra=None, clamp: float | None = None):
    """Reverse-chain sample conditioned on ``[S, A, extra]``.

    Returns the scalar chain output (soft-clamped when ``clamp`` is given).
    """
    cond = np.concatenate([np.atleast_2d(state), np.atleast_2d(action)]
                          + ([np.asarray(extra, dtype=float).reshape(1, -1)] if extra is not None else []),
                          axis=1)
    x0 = sample_chain(cond, renpnn, sched, rng, n=1)[0, 0]
    if not np.isfinite(x0):
        raise DivergenceError("non-finite reward sample")
    return float(soft_clamp(x0, clamp))


def gdm_residual(cond, renpnn: NoisePredictor, sched: DiffusionSchedule, rng: np.random.Generator,
                 record: bool = False) -> np.ndarray:
    """Chain output minus the output a zero predictor would give on the same
    noise. Identically zero for a network whose output layer is zero."""
    cond = np.atleast_2d(cond)
    noise = draw_chain_noise(cond.shape[0], 1, sched, rng)
    x0 = sample_chain(cond, renpnn, sched, rng, record=record, noise=noise)
    return (x0 - null_chain(noise, sched))[:, 0]


def designed_plus_gdm_reward(state, action, report: wenv.RateReport, bound: float,
                             renpnn: NoisePredictor, sched: DiffusionSchedule,
                             rng: np.random.Generator, clamp: float | None = 2.0,
                             include_rate: bool = True) -> float:
    extra = [report.sum_rate] if include_rate else []
    cond = np.concatenate([np.ravel(state), np.ravel(action), extra])
    res = gdm_residual(cond, renpnn, sched, rng)[0]
    if not np.isfinite(res):
        raise DivergenceError("non-finite reward residual")
    return designed_reward(report, bound) + float(soft_clamp(res, clamp))


@dataclass
class RewardConfig:
    variant: str = "designed"
    clamp: float = 2.0
    include_rate: bool = True
    learning_rate: float = 5e-5
    weight_decay: float = 7e-5
    hidden_width: int = 256
    renpnn_hidden_layers: int = 5
    shaper_hidden_layers: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown reward variant {self.variant!r}; choose from {VARIANTS}")
        if self.clamp <= 0:
            raise ValueError("clamp must be > 0")


class RewardModel:
    """One reward design plus whatever network it owns."""

    def __init__(self, cfg: RewardConfig, env_cfg: wenv.EnvConfig, sched: DiffusionSchedule,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.sched = sched
        sw, aw = wenv.state_width(env_cfg), wenv.action_width(env_cfg)
        self.cond_width = sw + aw + (1 if cfg.include_rate else 0)
        self.network = None
        if cfg.variant == "designed_mlp":
            self.network = RewardShaper(sw + aw + 1, [cfg.hidden_width] * cfg.shaper_hidden_layers, rng)
        elif cfg.variant in ("gdm", "designed_gdm"):
            self.network = NoisePredictor(1, self.cond_width,
                                          [cfg.hidden_width] * cfg.renpnn_hidden_layers, rng,
                                          n_steps=sched.n_steps,
                                          zero_output=cfg.variant == "designed_gdm")

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def learned(self) -> bool:
        return self.network is not None

    def _cond(self, state, feats, rate) -> np.ndarray:
        parts = [np.atleast_2d(state), np.atleast_2d(feats)]
        if self.cfg.include_rate:
            parts.append(np.asarray(rate, dtype=float).reshape(-1, 1))
        return np.concatenate(parts, axis=1)

    def emit(self, state, feats, report: wenv.RateReport, bound: float,
             rng: np.random.Generator) -> float:
        v = self.cfg.variant
        if v == "raw":
            return raw_reward(report)
        base = designed_reward(report, bound)
        if v == "designed":
            return base
        if v == "designed_mlp":
            return mlp_shaped_reward(state, feats, base, self.network, self.cfg.clamp)
        if v == "gdm":
            extra = [report.sum_rate] if self.cfg.include_rate else None
            return gdm_reward(state, feats, self.network, self.sched, rng, extra, self.cfg.clamp)
        return designed_plus_gdm_reward(state, feats, report, bound, self.network, self.sched, rng,
                                        self.cfg.clamp, self.cfg.include_rate)

    def update(self, batch: dict, rng: np.random.Generator) -> GradReport | None:
        """One ascent step on ``E[r * z]`` over a replay batch."""
        if not self.learned:
            return None
        quality = batch["sum_rate"] - batch["bound"]
        z = (quality - quality.mean()) / (quality.std() + 1e-8)
        n = len(z)
        c = self.cfg.clamp
        v = self.cfg.variant
        if v == "designed_mlp":
            net = self.network
            net.zero_grad()
            zin = _shaper_input(batch["state"], batch["action"], quality)
            f = net(zin, record=True)[:, 0]
            dev = f - quality
            g = -z * _soft_clamp_grad(dev, c) / n
            net.backward(g[:, None])
        else:
            net = self.network
            net.net.zero_grad()
            cond = self._cond(batch["state"], batch["action"], batch["sum_rate"])
            noise = draw_chain_noise(n, 1, self.sched, rng)
            x0 = sample_chain(cond, net, self.sched, rng, record=True, noise=noise)[:, 0]
            pre = x0 if v == "gdm" else x0 - null_chain(noise, self.sched)[:, 0]
            g = -z * _soft_clamp_grad(pre, c) / n
            chain_backward(g[:, None], net, self.sched)
            net = net.net
        report = net.grad_report()
        net.adam_step(self.cfg.learning_rate, self.cfg.weight_decay)
        return report

    def networks(self) -> dict[str, Mlp]:
        if isinstance(self.network, RewardShaper):
            return {"shaper_linear": self.network.linear, "shaper_residual": self.network.residual}
        if isinstance(self.network, NoisePredictor):
            return {"renpnn": self.network.net}
        return {}
