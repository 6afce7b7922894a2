"""Dense float64 MLPs with tape-based reverse-mode gradients, AdamW, and
the few complex-matrix helpers the channel model needs.

A network records one cache entry per recorded forward call and ``backward``
pops them in LIFO order, so the same network may be applied several times
inside a larger computation (a diffusion chain calls its noise predictor
``P`` times) and then differentiated end to end.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DivergenceError",
    "GradReport",
    "Mlp",
    "silu",
    "hermitian",
    "matmul",
    "quadratic_form",
]


class DivergenceError(RuntimeError):
    """Raised when a loss, gradient or sample stops being finite."""


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_ACTIVATIONS = {
    "silu": (silu, _silu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass
class GradReport:
    """Per-layer sums of absolute weight and bias gradients."""

    weight: list[float] = field(default_factory=list)
    bias: list[float] = field(default_factory=list)

    @property
    def weight_total(self) -> float:
        return float(sum(self.weight))

    @property
    def bias_total(self) -> float:
        return float(sum(self.bias))


class Mlp:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers use ``activation``; the output layer is linear unless
    ``output_activation`` says otherwise. Weights are stored as
    ``(fan_in, fan_out)`` so that ``y = x @ W + b`` on row batches.

    Parameters
    ----------
    widths : sequence of int
        Layer widths including input and output.
    rng : numpy.random.Generator
        Source for the uniform ``+-1/sqrt(fan_in)`` initialisation.
    activation : str
        One of ``"silu"``, ``"tanh"``, ``"linear"``.
    output_activation : str
        Activation applied to the last layer.
    zero_output : bool
        Zero the final layer so the network starts as the constant 0.
    """

    def __init__(self, widths, rng: np.random.Generator, activation: str = "silu",
                 output_activation: str = "linear", zero_output: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        self.activation = activation
        self.output_activation = output_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        if zero_output:
            self.weights[-1][...] = 0.0
            self.biases[-1][...] = 0.0
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]
        # AdamW state
        self.m = [np.zeros_like(p) for p in self.parameters()]
        self.v = [np.zeros_like(p) for p in self.parameters()]
        self.step_count = 0
        self._tape: list[list[tuple]] = []

    # -- structure -----------------------------------------------------
    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in ``[W0, b0, W1, b1, ...]`` order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.grad_weights, self.grad_biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.widths = list(self.widths)
        new.activation = self.activation
        new.output_activation = self.output_activation
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new.grad_weights = [np.zeros_like(w) for w in self.weights]
        new.grad_biases = [np.zeros_like(b) for b in self.biases]
        new.m = [np.zeros_like(p) for p in new.parameters()]
        new.v = [np.zeros_like(p) for p in new.parameters()]
        new.step_count = 0
        new._tape = []
        return new

    # -- forward / backward --------------------------------------------
    def _act_name(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.activation

    def _act(self, layer: int):
        return _ACTIVATIONS[self._act_name(layer)]

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        """Apply the network to a row batch (or a single row).

        With ``record=True`` the intermediate values are pushed onto the tape
        for a later :meth:`backward`.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ValueError(f"expected input width {self.in_width}, got shape {x.shape}")
        cache = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if self._act_name(i) == "silu":
                # keep the sigmoid for the backward pass
                s = _sigmoid(z)
                out = z * s
            else:
                s = None
                out = self._act(i)[0](z)
            if record:
                cache.append((h, z, s))
            h = out
        if record:
            self._tape.append(cache)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Back-propagate ``grad_out`` through the most recent recorded call.

        Parameter gradients are added to ``grad_weights``/``grad_biases``
        unless ``accumulate`` is false. Returns the gradient with respect to
        the input of that call.
        """
        if not self._tape:
            raise RuntimeError("backward called without a recorded forward pass")
        cache = self._tape.pop()
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        for i in reversed(range(self.n_layers)):
            h, z, s = cache[i]
            if s is not None:
                g = g * (s * (1.0 + z * (1.0 - s)))
            elif self._act_name(i) != "linear":
                g = g * self._act(i)[1](z)
            if accumulate:
                self.grad_weights[i] += h.T @ g
                self.grad_biases[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g if np.ndim(grad_out) > 1 else g[0]

    def clear_tape(self) -> None:
        self._tape.clear()

    def zero_grad(self) -> None:
        for g in self.gradients():
            g[...] = 0.0

    def grad_report(self) -> GradReport:
        return GradReport(
            weight=[float(np.abs(g).sum()) for g in self.grad_weights],
            bias=[float(np.abs(g).sum()) for g in self.grad_biases],
        )

    # -- optimisation --------------------------------------------------
    def adam_step(self, learning_rate: float, weight_decay: float = 0.0,
                  betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        """One AdamW step with decoupled weight decay.

        Raises :class:`DivergenceError` and leaves every parameter untouched
        if any gradient is non-finite.
        """
        grads = self.gradients()
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError("non-finite gradient; Adam step aborted")
        b1, b2 = betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.parameters(), grads, self.m, self.v):
            if weight_decay:
                p *= 1.0 - learning_rate * weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)

    # -- (de)serialisation ---------------------------------------------
    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}widths": np.asarray(self.widths),
               f"{prefix}step": np.asarray(self.step_count)}
        for i, (p, m, v) in enumerate(zip(self.parameters(), self.m, self.v)):
            out[f"{prefix}param{i}"] = p
            out[f"{prefix}adam_m{i}"] = m
            out[f"{prefix}adam_v{i}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        widths = [int(w) for w in state[f"{prefix}widths"]]
        if widths != self.widths:
            raise ValueError(f"checkpoint widths {widths} != network widths {self.widths}")
        for i, (p, m, v) in enumerate(zip(self.parameters(), self.m, self.v)):
            p[...] = state[f"{prefix}param{i}"]
            m[...] = state[f"{prefix}adam_m{i}"]
            v[...] = state[f"{prefix}adam_v{i}"]
        self.step_count = int(state[f"{prefix}step"])


# -- complex helpers ---------------------------------------------------------

def hermitian(m: np.ndarray) -> np.ndarray:
    return np.conj(np.asarray(m)).T


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def quadratic_form(w: np.ndarray, m: np.ndarray, tol: float = 1e-12) -> float:
    """Real value of ``w^H M w`` for Hermitian ``M``.

    The imaginary residue must be below ``tol`` relative to the magnitude of
    the result, otherwise ``M`` is not Hermitian and ``ValueError`` is raised.
    """
    w = np.asarray(w)
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != w.shape[0]:
        raise ValueError(f"dimension mismatch: w {w.shape}, M {m.shape}")
    val = np.vdot(w, m @ w)
    if abs(val.imag) > tol * max(1.0, abs(val.real)):
        raise ValueError(f"quadratic form has imaginary part {val.imag:.3e}")
    return float(val.real)
