"""Flat experiment configuration and its text file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Every key is a field of :class:`ExperimentConfig`; unknown keys
and unparsable values are hard errors. Tuples are written comma separated,
booleans as ``true``/``false``.

Resolution order: dataclass defaults, then the profile, then the file,
then explicit overrides (CLI flags).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .agent import AgentConfig, StateExplorationConfig
from .env import EnvConfig
from .rewards import VARIANTS, RewardConfig

__all__ = ["ConfigError", "ExperimentConfig", "PROFILES", "load_config", "parse_config", "dump_config"]


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class ExperimentConfig:
    # scenario
    cell_radius: float = 300.0
    bs_height: float = 100.0
    n_dl: int = 6
    n_ul: int = 4
    n_tx: int = 6
    n_rx: int = 6
    pathloss_exp: float = 3.6
    rho0: float = 4.16e-6
    noise_dbm_hz: float = -97.0
    p_max: float = 3.0
    p_ul: float = 1.0
    interferer_angles_deg: tuple[float, ...] = (-50.0, 20.0)
    interferer_gain_db: float = 20.0
    gain_model: str = "power"
    min_radius: float = 10.0
    mobility_std: float = 1.0
    # agent
    hidden_width: int = 256
    actor_hidden_layers: int = 4
    critic_hidden_layers: int = 2
    senpnn_hidden_layers: int = 4
    renpnn_hidden_layers: int = 5
    shaper_hidden_layers: int = 2
    lr_actor: float = 5e-5
    lr_critic: float = 3e-4
    lr_senpnn: float = 1e-4
    lr_reward: float = 5e-5
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
    # reward design
    reward_variant: str = "designed"
    reward_clamp: float = 2.0
    reward_include_rate: bool = True
    # state exploration
    state_exploration: bool = False
    se_max_prob: float = 0.9
    se_eta: float = 0.001
    se_threshold: float = 5e-4
    se_ema_decay: float = 0.99
    # run
    epochs: int = 3000
    steps_per_epoch: int = 16
    episode_length: int = 16
    ma_window: int = 100
    seed: int = 0

    def __post_init__(self):
        positive = ("lr_actor", "lr_critic", "lr_senpnn", "lr_reward", "tau", "gamma",
                    "epochs", "steps_per_epoch", "episode_length", "ma_window", "batch_size", "buffer_size",
                    "hidden_width", "updates_per_epoch", "senpnn_batch", "diffusion_steps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.tau > 1 or self.gamma > 1:
            raise ConfigError("tau and gamma must be <= 1")
        if self.reward_variant not in VARIANTS:
            raise ConfigError(f"reward_variant must be one of {VARIANTS}, got {self.reward_variant!r}")
        try:
            self.env_config()
            self.exploration_config()
            self.reward_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- views -----------------------------------------------------------
    def env_config(self) -> EnvConfig:
        return EnvConfig(
            cell_radius=self.cell_radius, bs_height=self.bs_height, n_dl=self.n_dl,
            n_ul=self.n_ul, n_tx=self.n_tx, n_rx=self.n_rx, pathloss_exp=self.pathloss_exp,
            rho0=self.rho0, noise_dbm_hz=self.noise_dbm_hz, p_max=self.p_max, p_ul=self.p_ul,
            interferer_angles_deg=tuple(self.interferer_angles_deg),
            interferer_gain_db=self.interferer_gain_db, gain_model=self.gain_model,
            min_radius=self.min_radius, mobility_std=self.mobility_std,
            episode_length=self.episode_length,
        )

    def agent_config(self) -> AgentConfig:
        names = {f.name for f in fields(AgentConfig)}
        return AgentConfig(**{n: getattr(self, n) for n in names})

    def reward_config(self) -> RewardConfig:
        return RewardConfig(
            variant=self.reward_variant, clamp=self.reward_clamp,
            include_rate=self.reward_include_rate, learning_rate=self.lr_reward,
            weight_decay=self.weight_decay, hidden_width=self.hidden_width,
            renpnn_hidden_layers=self.renpnn_hidden_layers,
            shaper_hidden_layers=self.shaper_hidden_layers,
        )

    def exploration_config(self) -> StateExplorationConfig:
        return StateExplorationConfig(eta=self.se_eta, max_prob=self.se_max_prob,
                                      threshold=self.se_threshold, ema_decay=self.se_ema_decay)

    def replace(self, **kw) -> "ExperimentConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **kw)


# Desk profile: full scenario, shortened run. Tiny profile: small scenario
# and smaller networks so a run takes minutes on one CPU core.
PROFILES: dict[str, dict] = {
    "desk": {"epochs": 3000, "steps_per_epoch": 16},
    "tiny": {
        "n_dl": 2, "n_ul": 2, "n_tx": 3, "n_rx": 3, "epochs": 500, "steps_per_epoch": 64,
        "episode_length": 16, "hidden_width": 64, "batch_size": 64, "updates_per_epoch": 32,
        "ma_window": 50, "lr_critic": 1e-3, "lr_actor": 3e-4, "gamma": 1e-3,
    },
}


def _field_types() -> dict[str, type]:
    out = {}
    for f in fields(ExperimentConfig):
        default = f.default
        out[f.name] = tuple if isinstance(default, tuple) else type(default)
    return out


def _parse_value(key: str, text: str, kind: type):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            val = float(text)
            if val != int(val):
                raise ValueError(text)
            return int(val)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse value {text!r} for key {key!r} as {kind.__name__}") from None


def parse_config(text: str) -> dict:
    """Parse config text into a dict of typed overrides."""
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, value, types[key])
    return out


def load_config(path=None, profile: str | None = None, **overrides) -> ExperimentConfig:
    """Build a validated config from profile, file and overrides."""
    values: dict = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    if path is not None:
        values.update(parse_config(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig().replace(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, tuple):
            text = ", ".join(repr(float(v)) for v in val)
        else:
            text = repr(val) if isinstance(val, float) else str(val)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
