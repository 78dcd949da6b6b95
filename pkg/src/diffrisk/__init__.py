"""Risk-averse fine-tuning of PPO policies by distilling their successful rollouts into a diffusion policy."""

from .config import PipelineConfig, load_config
from .diffusion import DiffusionConfig, DiffusionPolicy, train_diffusion
from .envs import EnvConfig, make_env
from .evaluation import evaluate, harvest, wilson_interval
from .ppo import GaussianPolicy, PPOConfig, train_ppo
from .trajstore import Trajectory, filter_success, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "DiffusionConfig",
    "DiffusionPolicy",
    "EnvConfig",
    "GaussianPolicy",
    "PPOConfig",
    "PipelineConfig",
    "Trajectory",
    "evaluate",
    "filter_success",
    "harvest",
    "load_config",
    "load_dataset",
    "make_env",
    "save_dataset",
    "train_diffusion",
    "train_ppo",
    "wilson_interval",
]
