"""Full-duplex multi-user base station: LoS channels, rates, and MDP plumbing.

The BS sits at the origin at height ``bs_height``; it serves ``K`` single
antenna downlink users with an ``N_t`` transmit ULA and receives ``L``
uplink users on an ``N_r`` receive ULA. Environment clutter from ``F``
point interferers couples the downlink signal into the receiver through
``G = sum_f beta_f a_r(theta_f) a_t(theta_f)^H``.

Real encodings (states, raw actions) interleave real and imaginary parts per
antenna and list users in index order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "EnvConfig",
    "ChannelState",
    "NetworkAction",
    "RateReport",
    "InfeasibleActionError",
    "steering",
    "pathloss_amplitude",
    "sample_positions",
    "sample_channels",
    "downlink_snr",
    "uplink_sinr",
    "sum_rate",
    "project_action",
    "action_features",
    "action_features_backward",
    "move_users",
    "env_step",
    "encode_state",
    "state_width",
    "action_width",
    "feature_width",
    "WirelessEnv",
]

FEASIBILITY_TOL = 1e-9


class InfeasibleActionError(ValueError):
    """The action violates a power constraint."""


def _dbm_per_hz_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class EnvConfig:
    """Scenario constants. Defaults reproduce the reference setup."""

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
    # "power": rho0 * d^-alpha is the power gain (amplitude is its square root).
    # "amplitude": it multiplies the steering vector directly.
    gain_model: str = "power"
    min_radius: float = 10.0
    mobility_std: float = 1.0
    episode_length: int = 16

    def __post_init__(self):
        for name in ("n_dl", "n_ul", "n_tx", "n_rx", "episode_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("p_max", "p_ul", "rho0", "cell_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.pathloss_exp <= 2:
            raise ValueError("pathloss_exp must exceed 2")
        if self.gain_model not in ("power", "amplitude"):
            raise ValueError(f"unknown gain_model {self.gain_model!r}")
        if not 0 <= self.min_radius < self.cell_radius:
            raise ValueError("min_radius must lie in [0, cell_radius)")
        if self.mobility_std < 0:
            raise ValueError("mobility_std must be >= 0")

    @property
    def noise_dl(self) -> float:
        return _dbm_per_hz_to_watts(self.noise_dbm_hz)

    @property
    def noise_ul(self) -> float:
        return _dbm_per_hz_to_watts(self.noise_dbm_hz)

    @property
    def interferer_power(self) -> float:
        """``|beta_f|^2`` in watts-equivalent units."""
        return 10.0 ** (self.interferer_gain_db / 10.0) * self.noise_ul

    def with_(self, **kw) -> "EnvConfig":
        return replace(self, **kw)


@dataclass
class ChannelState:
    dl_pos: np.ndarray  # (K, 2) metres
    ul_pos: np.ndarray  # (L, 2)
    g: np.ndarray  # (K, N_t) complex
    h: np.ndarray  # (L, N_r) complex
    clutter: np.ndarray  # (N_r, N_t) complex


@dataclass
class NetworkAction:
    w: np.ndarray  # (L, N_r) receive beamformers, unit norm
    v: np.ndarray  # (K, N_t) transmit beamformers
    p: np.ndarray  # (L,) uplink powers

    def residuals(self, cfg: EnvConfig) -> tuple[float, float]:
        """Constraint violations (power budget excess, uplink power excess)."""
        budget = float(np.sum(np.abs(self.v) ** 2)) - cfg.p_max
        ul = float(max(np.max(self.p - cfg.p_ul), np.max(-self.p)))
        return max(budget, 0.0), max(ul, 0.0)

    def is_feasible(self, cfg: EnvConfig, tol: float = FEASIBILITY_TOL) -> bool:
        return all(r <= tol for r in self.residuals(cfg))


@dataclass
class RateReport:
    dl_snr: np.ndarray
    ul_sinr: np.ndarray
    sum_rate: float = field(init=False)

    def __post_init__(self):
        self.sum_rate = float(np.sum(np.log2(1.0 + self.ul_sinr))
                              + np.sum(np.log2(1.0 + self.dl_snr)))


# -- channel model -----------------------------------------------------------

def steering(theta, n: int) -> np.ndarray:
    """Half-wavelength ULA response, unit norm.

    ``theta`` may be a scalar or an array; an array gives one row per angle.
    """
    if n < 1:
        raise ValueError("antenna count must be >= 1")
    theta = np.asarray(theta, dtype=float)
    m = np.arange(n)
    phase = np.pi * np.multiply.outer(np.sin(theta), m)
    return np.exp(1j * phase) / np.sqrt(n)


def pathloss_amplitude(dist, cfg: EnvConfig) -> np.ndarray:
    """Channel amplitude at 3-D distance ``dist`` (clamped to 1 m)."""
    d = np.maximum(np.asarray(dist, dtype=float), 1.0)
    gain = cfg.rho0 * d ** (-cfg.pathloss_exp)
    return np.sqrt(gain) if cfg.gain_model == "power" else gain


def _geometry(pos: np.ndarray, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    dist = np.sqrt(pos[:, 0] ** 2 + pos[:, 1] ** 2 + cfg.bs_height ** 2)
    theta = np.arctan2(pos[:, 1], pos[:, 0])
    return dist, theta


def clutter_matrix(cfg: EnvConfig) -> np.ndarray:
    angles = np.deg2rad(np.asarray(cfg.interferer_angles_deg, dtype=float))
    clutter = np.zeros((cfg.n_rx, cfg.n_tx), dtype=complex)
    beta = np.sqrt(cfg.interferer_power)
    for th in angles:
        clutter += beta * np.outer(steering(th, cfg.n_rx), np.conj(steering(th, cfg.n_tx)))
    return clutter


def sample_positions(cfg: EnvConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions (by area) in the annulus ``[min_radius, cell_radius]``."""
    r2 = rng.uniform(cfg.min_radius ** 2, cfg.cell_radius ** 2, size=n)
    phi = rng.uniform(-np.pi, np.pi, size=n)
    r = np.sqrt(r2)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


def sample_channels(cfg: EnvConfig, dl_pos=None, ul_pos=None,
                    rng: np.random.Generator | None = None) -> ChannelState:
    """Build the channel state for given (or freshly drawn) user positions."""
    if dl_pos is None or ul_pos is None:
        if rng is None:
            raise ValueError("either positions or rng must be given")
        dl_pos = sample_positions(cfg, cfg.n_dl, rng) if dl_pos is None else dl_pos
        ul_pos = sample_positions(cfg, cfg.n_ul, rng) if ul_pos is None else ul_pos
    dl_pos = np.asarray(dl_pos, dtype=float).reshape(cfg.n_dl, 2)
    ul_pos = np.asarray(ul_pos, dtype=float).reshape(cfg.n_ul, 2)
    for pos in (dl_pos, ul_pos):
        if np.any(np.hypot(pos[:, 0], pos[:, 1]) > cfg.cell_radius * (1 + 1e-12)):
            raise ValueError("user position outside the cell")
    d_dl, th_dl = _geometry(dl_pos, cfg)
    d_ul, th_ul = _geometry(ul_pos, cfg)
    g = pathloss_amplitude(d_dl, cfg)[:, None] * steering(th_dl, cfg.n_tx)
    h = pathloss_amplitude(d_ul, cfg)[:, None] * steering(th_ul, cfg.n_rx)
    return ChannelState(dl_pos, ul_pos, g, h, clutter_matrix(cfg))


# -- rates -------------------------------------------------------------------

def downlink_snr(state: ChannelState, action: NetworkAction, cfg: EnvConfig) -> np.ndarray:
    gain = np.abs(np.sum(np.conj(state.g) * action.v, axis=1)) ** 2
    return gain / cfg.noise_dl


def uplink_sinr(state: ChannelState, action: NetworkAction, cfg: EnvConfig) -> np.ndarray:
    h, w, p = state.h, action.w, np.asarray(action.p, dtype=float)
    q = action.v.T @ np.conj(action.v)  # sum_k v_k v_k^H
    base = state.clutter @ q @ np.conj(state.clutter).T + cfg.noise_ul * np.eye(cfg.n_rx)
    # |w_l^H h_j|^2 for every pair (l, j)
    cross = np.abs(np.conj(w) @ h.T) ** 2
    signal = p * np.diag(cross)
    interference = cross @ p - signal
    clutter_noise = np.real(np.einsum("li,ij,lj->l", np.conj(w), base, w))
    return signal / (interference + clutter_noise)


def sum_rate(state: ChannelState, action: NetworkAction, cfg: EnvConfig) -> RateReport:
    if not action.is_feasible(cfg):
        raise InfeasibleActionError(f"constraint residuals {action.residuals(cfg)}")
    return RateReport(downlink_snr(state, action, cfg), uplink_sinr(state, action, cfg))


# -- encodings ---------------------------------------------------------------

def action_width(cfg: EnvConfig) -> int:
    return 2 * cfg.n_tx * cfg.n_dl + 2 * cfg.n_rx * cfg.n_ul + cfg.n_ul


feature_width = action_width


def state_width(cfg: EnvConfig) -> int:
    return 2 * (cfg.n_dl + cfg.n_ul) + 2 * (cfg.n_tx * cfg.n_dl + cfg.n_rx * cfg.n_ul)


def _interleave(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z).reshape(-1)
    return np.stack([z.real, z.imag], axis=1).reshape(-1)


def _deinterleave(x: np.ndarray, shape) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    return (x[:, 0] + 1j * x[:, 1]).reshape(shape)


def encode_state(state: ChannelState, cfg: EnvConfig) -> np.ndarray:
    """Flatten a channel state into a real vector of order one.

    Positions are divided by the cell radius and channel entries by the
    amplitude a user directly beneath the BS would see.
    """
    ch_scale = float(pathloss_amplitude(cfg.bs_height, cfg)) / np.sqrt(min(cfg.n_tx, cfg.n_rx))
    return np.concatenate([
        state.dl_pos.reshape(-1) / cfg.cell_radius,
        state.ul_pos.reshape(-1) / cfg.cell_radius,
        _interleave(state.g) / ch_scale,
        _interleave(state.h) / ch_scale,
    ])


# -- action projection -------------------------------------------------------

def _split_raw(raw: np.ndarray, cfg: EnvConfig):
    nv = 2 * cfg.n_tx * cfg.n_dl
    nw = 2 * cfg.n_rx * cfg.n_ul
    return raw[..., :nv], raw[..., nv:nv + nw], raw[..., nv + nw:]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def project_action(raw: np.ndarray, cfg: EnvConfig) -> NetworkAction:
    """Map an unconstrained real vector onto a feasible action.

    The transmit block is shrunk radially onto the power ball, every receive
    beamformer is normalised (an all-zero one becomes the first basis
    vector) and uplink powers pass through ``P_l * sigmoid``.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (action_width(cfg),):
        raise ValueError(f"raw action must have shape ({action_width(cfg)},), got {raw.shape}")
    rv, rw, rp = _split_raw(raw, cfg)
    v = _deinterleave(rv, (cfg.n_dl, cfg.n_tx))
    power = float(np.sum(np.abs(v) ** 2))
    if power > cfg.p_max:
        v = v * np.sqrt(cfg.p_max / power)
        # guard the last ulp so the budget holds exactly
        while np.sum(np.abs(v) ** 2) > cfg.p_max:
            v = v * (1.0 - 1e-15)
    w = _deinterleave(rw, (cfg.n_ul, cfg.n_rx))
    norms = np.linalg.norm(w, axis=1)
    for l in range(cfg.n_ul):
        if norms[l] < 1e-12:
            w[l] = 0.0
            w[l, 0] = 1.0
        else:
            w[l] = w[l] / norms[l]
    p = np.clip(cfg.p_ul * _sigmoid(rp), 0.0, cfg.p_ul)
    return NetworkAction(w=w, v=v, p=p)


def action_features(raw: np.ndarray, cfg: EnvConfig):
    """Differentiable batch version of :func:`project_action` for critics.

    Returns ``(features, cache)`` where features hold the projected transmit
    block divided by ``sqrt(P_max)``, the normalised receive block, and the
    powers divided by ``P_l``, all in the raw layout.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    rv, rw, rp = _split_raw(raw, cfg)
    n = raw.shape[0]
    vnorm = np.sqrt(np.sum(rv ** 2, axis=1))
    radius = np.sqrt(cfg.p_max)
    shrink = vnorm > radius
    vscale = np.where(shrink, radius / np.maximum(vnorm, 1e-300), 1.0)
    fv = rv * vscale[:, None] / radius
    w3 = rw.reshape(n, cfg.n_ul, 2 * cfg.n_rx)
    wnorm = np.maximum(np.sqrt(np.sum(w3 ** 2, axis=2)), 1e-12)
    fw = (w3 / wnorm[..., None]).reshape(n, -1)
    sig = _sigmoid(rp)
    feats = np.concatenate([fv, fw, sig], axis=1)
    return feats, (rv, vnorm, shrink, fv, w3, wnorm, sig)


def action_features_backward(grad: np.ndarray, cache, cfg: EnvConfig) -> np.ndarray:
    rv, vnorm, shrink, fv, w3, wnorm, sig = cache
    grad = np.atleast_2d(grad)
    gv, gw, gp = _split_raw(grad, cfg)
    radius = np.sqrt(cfg.p_max)
    n = grad.shape[0]
    # inside the ball: fv = rv / radius; on the sphere: fv = rv / |rv|
    inside = gv / radius
    u = rv / np.maximum(vnorm, 1e-300)[:, None]
    on_sphere = (gv - u * np.sum(u * gv, axis=1, keepdims=True)) / np.maximum(vnorm, 1e-300)[:, None]
    dv = np.where(shrink[:, None], on_sphere, inside)
    gw3 = gw.reshape(n, cfg.n_ul, 2 * cfg.n_rx)
    uw = w3 / wnorm[..., None]
    dw = (gw3 - uw * np.sum(uw * gw3, axis=2, keepdims=True)) / wnorm[..., None]
    dp = gp * sig * (1.0 - sig)
    return np.concatenate([dv, dw.reshape(n, -1), dp], axis=1)


# -- dynamics ----------------------------------------------------------------

def _reflect(pos: np.ndarray, radius: float) -> np.ndarray:
    r = np.hypot(pos[:, 0], pos[:, 1])
    out = pos.copy()
    over = r > radius
    if np.any(over):
        new_r = np.clip(2 * radius - r[over], 0.0, radius)
        out[over] *= (new_r / r[over])[:, None]
    return out


def move_users(pos: np.ndarray, cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """One Gaussian random-walk step per user, reflected at the cell edge.

    Each coordinate moves with standard deviation ``mobility_std / sqrt(2)``
    so the RMS displacement per step equals ``mobility_std``.
    """
    if cfg.mobility_std == 0:
        return np.array(pos, dtype=float, copy=True)
    step = rng.normal(0.0, cfg.mobility_std / np.sqrt(2.0), size=np.shape(pos))
    return _reflect(np.asarray(pos, dtype=float) + step, cfg.cell_radius)


def env_step(state: ChannelState, action: NetworkAction, cfg: EnvConfig,
             rng: np.random.Generator) -> tuple[ChannelState, RateReport]:
    """Evaluate ``action`` on the current channels, then move the users."""
    report = sum_rate(state, action, cfg)
    nxt = sample_channels(cfg, move_users(state.dl_pos, cfg, rng),
                          move_users(state.ul_pos, cfg, rng))
    return nxt, report


class WirelessEnv:
    """Episodic wrapper: users are re-placed at every :meth:`reset`."""

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.state: ChannelState | None = None
        self.t = 0

    def reset(self) -> ChannelState:
        self.state = sample_channels(self.cfg, rng=self.rng)
        self.t = 0
        return self.state

    def step(self, action: NetworkAction) -> tuple[ChannelState, RateReport, bool]:
        if self.state is None:
            raise RuntimeError("reset() must be called first")
        self.state, report = env_step(self.state, action, self.cfg, self.rng)
        self.t += 1
        return self.state, report, self.t >= self.cfg.episode_length
