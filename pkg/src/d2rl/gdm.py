"""Denoising diffusion machinery used for state, action and reward exploration.

Two operating modes share one noise-predictor network type:

* Mode I runs only the reverse chain from Gaussian noise and trains the
  predictor to maximise a differentiable score (a critic's Q value) of the
  chain output, back-propagating through every reverse step.
* Mode II corrupts real samples to step ``P`` and denoises them back, the
  predictor being trained with the noise-prediction MSE.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import DivergenceError, GradReport, Mlp

__all__ = [
    "DiffusionSchedule",
    "NoisePredictor",
    "make_schedule",
    "step_embedding",
    "forward_step",
    "forward_jump",
    "reverse_step",
    "draw_chain_noise",
    "null_chain",
    "sample_chain",
    "chain_backward",
    "denoise_loss",
    "denoise_train_step",
    "mode2_generate",
    "mode2_train_and_generate",
    "mode1_policy_grad_step",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise tables indexed by step ``p = 0..P``; entry 0 is a sentinel
    (``beta=0``, ``alpha_bar=1``)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_tildes: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=float).reshape(-1)
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        b = np.concatenate([[0.0], betas])
        a = 1.0 - b
        ab = np.cumprod(a)
        bt = np.zeros_like(b)
        for p in range(1, len(b)):
            bt[p] = (1.0 - ab[p - 1]) / (1.0 - ab[p]) * b[p] if ab[p] < 1 else 0.0
        return cls(b, a, ab, bt)


def make_schedule(n_steps: int = 6, beta_min: float = 1e-4, beta_max: float = 0.2) -> DiffusionSchedule:
    """Linear beta schedule over ``n_steps`` steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return DiffusionSchedule.from_betas(np.linspace(beta_min, beta_max, n_steps))


def step_embedding(p, dim: int, n_steps: int) -> np.ndarray:
    """Sinusoidal code of the step index, one row per entry of ``p``."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    half = dim // 2
    freqs = np.pi / 2.0 * 2.0 ** np.arange(half) / max(n_steps, 1)
    ang = np.outer(p, freqs)
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, (p / max(n_steps, 1))[:, None]], axis=1)
    return emb


class NoisePredictor:
    """``eps_theta(x_p, p, cond)`` as an MLP on ``[x_p, cond, emb(p)]``.

    Parameters
    ----------
    sample_width, cond_width : int
        Widths of the denoised sample and of the conditioning vector
        (0 for an unconditional predictor).
    hidden : sequence of int
        Hidden layer widths.
    n_steps : int
        Number of diffusion steps, used to scale the step code.
    emb_dim : int
        Width of the sinusoidal step code.
    """

    def __init__(self, sample_width: int, cond_width: int, hidden, rng: np.random.Generator,
                 n_steps: int = 6, emb_dim: int = 8, zero_output: bool = False):
        self.sample_width = int(sample_width)
        self.cond_width = int(cond_width)
        self.emb_dim = int(emb_dim)
        self.n_steps = int(n_steps)
        widths = [self.sample_width + self.cond_width + self.emb_dim, *hidden, self.sample_width]
        self.net = Mlp(widths, rng, zero_output=zero_output)
        self._emb_cache: dict[int, np.ndarray] = {}

    def _inputs(self, x, p, cond) -> np.ndarray:
        x = np.atleast_2d(x)
        n = x.shape[0]
        parts = [x]
        if self.cond_width:
            cond = np.atleast_2d(np.asarray(cond, dtype=float))
            if cond.shape[1] != self.cond_width:
                raise ValueError(f"expected conditioning width {self.cond_width}, got {cond.shape[1]}")
            parts.append(np.broadcast_to(cond, (n, self.cond_width)))
        if np.ndim(p) == 0:
            key = int(p)
            if key not in self._emb_cache:
                self._emb_cache[key] = step_embedding(key, self.emb_dim, self.n_steps)
            emb = self._emb_cache[key]
        else:
            emb = step_embedding(p, self.emb_dim, self.n_steps)
        parts.append(np.broadcast_to(emb, (n, self.emb_dim)))
        return np.concatenate(parts, axis=1)

    def __call__(self, x, p, cond=None, record: bool = False) -> np.ndarray:
        return self.net.forward(self._inputs(x, p, cond), record=record)

    def backward(self, grad_out: np.ndarray, accumulate: bool = True):
        """Returns gradients w.r.t. ``(x, cond)`` of the latest recorded call."""
        g = self.net.backward(np.atleast_2d(grad_out), accumulate=accumulate)
        return g[:, :self.sample_width], g[:, self.sample_width:self.sample_width + self.cond_width]


# -- forward process ---------------------------------------------------------

def forward_step(x_prev, p: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= p <= sched.n_steps:
        raise ValueError(f"step {p} outside 1..{sched.n_steps}")
    x_prev = np.asarray(x_prev, dtype=float)
    eps = rng.standard_normal(x_prev.shape)
    return np.sqrt(1.0 - sched.betas[p]) * x_prev + np.sqrt(sched.betas[p]) * eps


def forward_jump(x0, p: int, sched: DiffusionSchedule, rng: np.random.Generator):
    """Sample ``x_p`` directly from ``x_0``; returns ``(x_p, eps)``."""
    if not 1 <= p <= sched.n_steps:
        raise ValueError(f"step {p} outside 1..{sched.n_steps}")
    x0 = np.asarray(x0, dtype=float)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bars[p]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


# -- reverse process ---------------------------------------------------------

def _reverse_coeffs(p: int, sched: DiffusionSchedule) -> tuple[float, float, float]:
    a, ab, b = sched.alphas[p], sched.alpha_bars[p], sched.betas[p]
    return 1.0 / np.sqrt(a), b / np.sqrt(a * (1.0 - ab)), np.sqrt(b)


def reverse_step(x_p, p: int, cond, net: NoisePredictor, sched: DiffusionSchedule,
                 rng: np.random.Generator, record: bool = False, z=None) -> np.ndarray:
    """One denoising step ``x_p -> x_{p-1}``; no noise is added at ``p = 1``.

    ``z`` overrides the standard normal draw of the added noise.
    """
    if not 1 <= p <= sched.n_steps:
        raise ValueError(f"step {p} outside 1..{sched.n_steps}")
    x_p = np.asarray(x_p, dtype=float)
    c_x, c_eps, c_noise = _reverse_coeffs(p, sched)
    eps_hat = net(x_p, p, cond, record=record).reshape(x_p.shape)
    out = c_x * x_p - c_eps * eps_hat
    if p > 1:
        out = out + c_noise * (rng.standard_normal(x_p.shape) if z is None else z)
    return out


def draw_chain_noise(n: int, width: int, sched: DiffusionSchedule,
                     rng: np.random.Generator) -> np.ndarray:
    """All Gaussian draws of one reverse chain, shape ``(P + 1, n, width)``.

    Entry 0 is the starting sample ``x_P``; entry ``p`` (``2 <= p <= P``) is
    the noise added by reverse step ``p``. Entry 1 stays zero.
    """
    noise = np.zeros((sched.n_steps + 1, n, width))
    noise[0] = rng.standard_normal((n, width))
    for p in range(sched.n_steps, 1, -1):
        noise[p] = rng.standard_normal((n, width))
    return noise


def null_chain(noise: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Chain output for a predictor that always returns zero."""
    x = np.array(noise[0], dtype=float)
    for p in range(sched.n_steps, 0, -1):
        c_x, _, c_noise = _reverse_coeffs(p, sched)
        x = c_x * x + (c_noise * noise[p] if p > 1 else 0.0)
    return x


def sample_chain(cond, net: NoisePredictor, sched: DiffusionSchedule, rng: np.random.Generator,
                 n: int | None = None, x_start=None, record: bool = False,
                 noise=None) -> np.ndarray:
    """Run the full reverse chain from ``x_P`` (Gaussian unless given).

    ``n`` sets the batch size when ``cond`` is absent or a single row.
    ``noise`` replays draws from :func:`draw_chain_noise` and takes
    precedence over ``x_start``. Returns an ``(n, sample_width)`` array.
    """
    if noise is not None:
        x = np.array(noise[0], dtype=float)
        for p in range(sched.n_steps, 0, -1):
            x = reverse_step(x, p, cond, net, sched, rng, record=record, z=noise[p])
            if not np.all(np.isfinite(x)):
                net.net.clear_tape()
                raise DivergenceError(f"non-finite sample at reverse step {p}")
        return x
    if x_start is None:
        if n is None:
            n = 1 if cond is None or np.ndim(cond) < 2 else np.shape(cond)[0]
        x = rng.standard_normal((n, net.sample_width))
    else:
        x = np.atleast_2d(np.asarray(x_start, dtype=float)).copy()
    for p in range(sched.n_steps, 0, -1):
        x = reverse_step(x, p, cond, net, sched, rng, record=record)
        if not np.all(np.isfinite(x)):
            net.net.clear_tape()
            raise DivergenceError(f"non-finite sample at reverse step {p}")
    return x


def chain_backward(grad_x0: np.ndarray, net: NoisePredictor, sched: DiffusionSchedule):
    """Back-propagate through a recorded ``sample_chain``; returns the
    gradients w.r.t. ``x_P`` and the summed gradient w.r.t. the conditioning."""
    g = np.atleast_2d(np.asarray(grad_x0, dtype=float))
    g_cond = 0.0
    for p in range(1, sched.n_steps + 1):
        c_x, c_eps, _ = _reverse_coeffs(p, sched)
        gx, gc = net.backward(-c_eps * g)
        g_cond = g_cond + gc
        g = c_x * g + gx
    return g, g_cond


# -- training objectives -----------------------------------------------------

def denoise_loss(x0, cond, net: NoisePredictor, sched: DiffusionSchedule,
                 rng: np.random.Generator, record: bool = False):
    """Noise-prediction loss averaged over the batch.

    Each row gets its own step ``p`` uniform in ``1..P`` and its own noise.
    Returns ``(loss, grad_wrt_prediction)``; the gradient is only useful
    together with ``record=True``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    p = rng.integers(1, sched.n_steps + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bars[p][:, None]
    xp = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = net(xp, p, cond, record=record)
    diff = pred - eps
    loss = float(np.mean(np.sum(diff ** 2, axis=1)))
    return loss, 2.0 * diff / n


def denoise_train_step(x0, cond, net: NoisePredictor, sched: DiffusionSchedule,
                       rng: np.random.Generator, learning_rate: float,
                       weight_decay: float = 0.0) -> tuple[float, GradReport]:
    net.net.zero_grad()
    loss, grad = denoise_loss(x0, cond, net, sched, rng, record=True)
    if not np.isfinite(loss):
        net.net.clear_tape()
        raise DivergenceError("non-finite denoising loss")
    net.backward(grad)
    report = net.net.grad_report()
    net.net.adam_step(learning_rate, weight_decay)
    return loss, report


def mode2_generate(x0, cond, net: NoisePredictor, sched: DiffusionSchedule,
                   rng: np.random.Generator) -> np.ndarray:
    """Corrupt real samples to step ``P`` and denoise them back."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if sched.n_steps == 0:
        return x0.copy()
    xP, _ = forward_jump(x0, sched.n_steps, sched, rng)
    return sample_chain(cond, net, sched, rng, x_start=xP)


def mode2_train_and_generate(dataset, cond, net: NoisePredictor, sched: DiffusionSchedule,
                             rng: np.random.Generator, n_iters: int = 2000, batch_size: int = 256,
                             learning_rate: float = 1e-3, weight_decay: float = 0.0,
                             n_generate: int | None = None):
    """Fit ``net`` to ``dataset`` with the noise-prediction loss, then
    generate ``n_generate`` samples by Mode II from random dataset rows.

    Returns ``(samples, losses)``.
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    losses = []
    for _ in range(n_iters):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        c = None if cond is None or np.ndim(cond) < 2 else np.asarray(cond)[idx]
        loss, _ = denoise_train_step(data[idx], c if c is not None else cond, net, sched, rng,
                                     learning_rate, weight_decay)
        losses.append(loss)
    n_generate = data.shape[0] if n_generate is None else n_generate
    idx = rng.integers(0, data.shape[0], size=n_generate)
    c = None if cond is None or np.ndim(cond) < 2 else np.asarray(cond)[idx]
    return mode2_generate(data[idx], c if c is not None else cond, net, sched, rng), losses


def mode1_policy_grad_step(cond, net: NoisePredictor, sched: DiffusionSchedule,
                           critic: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
                           rng: np.random.Generator, learning_rate: float,
                           weight_decay: float = 0.0, n: int | None = None,
                           apply: bool = True) -> tuple[float, GradReport, np.ndarray]:
    """One ascent step on ``E[Q(X0)]`` through a reparameterised chain.

    ``critic(x0)`` must return ``(q, dq_dx0)`` with ``q`` of shape ``(n,)``.
    Returns ``(loss, grad_report, x0)`` where ``loss = -mean(q)``. A
    non-finite loss skips the update and raises :class:`DivergenceError`.
    """
    net.net.zero_grad()
    x0 = sample_chain(cond, net, sched, rng, n=n, record=True)
    q, dq = critic(x0)
    q = np.asarray(q, dtype=float).reshape(-1)
    loss = -float(np.mean(q))
    if not np.isfinite(loss) or not np.all(np.isfinite(dq)):
        net.net.clear_tape()
        raise DivergenceError("non-finite Mode I objective")
    chain_backward(-np.atleast_2d(dq) / len(q), net, sched)
    report = net.net.grad_report()
    if apply:
        net.net.adam_step(learning_rate, weight_decay)
    return loss, report, x0
