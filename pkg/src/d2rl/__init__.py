"""Diffusion-enhanced deep reinforcement learning for full-duplex
beamforming and power control, in plain numpy.

Subpackages and modules
-----------------------
numerics
    Dense networks with manual backprop, AdamW, complex helpers.
env
    Full-duplex base station with clutter, rates and action projection.
gdm
    Diffusion schedule, forward/reverse chains, Mode I and Mode II.
agent
    Double-critic actor-critic agent and the state explorer.
rewards
    Raw, designed and learned reward variants.
trainer
    Epoch loop and checkpoints.
harness
    Experiment runner, sweeps, plots, comparison reports and the CLI.
"""
from .config import ExperimentConfig, load_config
from .numerics import DivergenceError

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "load_config", "DivergenceError", "__version__"]
