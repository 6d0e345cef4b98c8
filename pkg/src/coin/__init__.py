"""Chance-constrained imitation learning for resource oversubscription."""

__version__ = "0.1.0"

from .airlineenv import AirlineConfig, AirlineEnv
from .chance import ValueEnsemble, evaluate_constraint, m_delta, project_action, safety_projection
from .cloudenv import CloudConfig, CloudEnv, pm_hot_ratio, saved_cores
from .evaluation import build_report, constraint_verdict, emit_curves
from .telemetry import DatasetSpec, UsageRegime, generate_dataset, load_traces, save_traces
from .trainer import ChanceConfig, TrainConfig, evaluate, grid_policy, train, train_bc, train_bc_hard, train_coin

__all__ = [
    "AirlineConfig", "AirlineEnv", "ChanceConfig", "CloudConfig", "CloudEnv", "DatasetSpec", "TrainConfig",
    "UsageRegime", "ValueEnsemble", "build_report", "constraint_verdict", "emit_curves", "evaluate",
    "evaluate_constraint", "generate_dataset", "grid_policy", "load_traces", "m_delta", "pm_hot_ratio",
    "project_action", "safety_projection", "save_traces", "saved_cores", "train", "train_bc", "train_bc_hard",
    "train_coin",
]
