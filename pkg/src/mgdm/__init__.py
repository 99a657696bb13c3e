"""Multi-grained selective state-space model for return-conditioned
offline RL, with progressive self-evolution regularization, on synthetic
continuous-control trajectory data."""

from .autodiff import Tensor, backward, no_grad
from .data import Trajectory, compute_rtg, load_trajectories, save_trajectories
from .envs import ToyEnv
from .model import DecisionMamba, ModelConfig
from .train import LossWeights, OptimConfig, PserSchedule, beta_at, train

__all__ = [
    "Tensor", "backward", "no_grad",
    "Trajectory", "compute_rtg", "load_trajectories", "save_trajectories",
    "ToyEnv", "DecisionMamba", "ModelConfig",
    "LossWeights", "OptimConfig", "PserSchedule", "beta_at", "train",
]

__version__ = "0.1.0"
