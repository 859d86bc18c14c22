"""Grid-world navigation lab: multi-scale recurrent Q agent vs classical planners."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .gridworld import (
    DynamicsConfig,
    GridEnv,
    GridMap,
    RewardConfig,
    generate_map,
    load_map,
    save_map,
)
from .metrics import EpisodeMetrics, SuiteSummary, summarize
from .planners import RrtConfig, execute_adaptive, execute_blind, plan
from .policy import ExplorationSchedule, greedy_action, select_action
from .qnet import QNetConfig, QNetParams, forward, load_checkpoint, save_checkpoint
from .replay import ReplayBuffer, Transition
from .trainer import TrainConfig, TrainingDiverged, evaluate, run_training

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DynamicsConfig", "EpisodeMetrics", "ExperimentConfig",
    "ExplorationSchedule", "GridEnv", "GridMap", "QNetConfig", "QNetParams",
    "ReplayBuffer", "RewardConfig", "RrtConfig", "SuiteSummary",
    "TrainConfig", "TrainingDiverged", "Transition", "evaluate",
    "execute_adaptive", "execute_blind", "forward", "generate_map",
    "greedy_action", "load_checkpoint", "load_map", "load_config",
    "parse_config_text", "plan", "run_training", "save_checkpoint",
    "save_map", "select_action", "summarize",
]
