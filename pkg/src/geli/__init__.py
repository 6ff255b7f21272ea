"""Reward decomposition from a single session-level score plus per-turn proxy labels.

Modules: ``traj`` (trajectory data), ``reward_net`` (MLP reward, AdamW,
checkpoints), ``losses`` (decomposition and shaping objectives), ``synth``
(synthetic environment with hidden per-step rewards), ``training``,
``evaluation``, ``policy`` (PPO adaptation), ``config``, ``pipeline`` and ``cli``.
"""

from .config import ExperimentConfig, load_config
from .losses import GeliConfig
from .reward_net import RewardNetParams, init_params
from .synth import EnvConfig, generate
from .traj import Dataset, Step, Trajectory

__version__ = "0.1.0"

__all__ = ["Dataset", "EnvConfig", "ExperimentConfig", "GeliConfig", "RewardNetParams", "Step",
           "Trajectory", "generate", "init_params", "load_config", "__version__"]
