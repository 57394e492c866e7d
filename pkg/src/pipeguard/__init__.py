"""Deterministic simulator for Byzantine-resilient pipeline-parallel training."""

from .adversary import AttackConfig, AttackKind
from .datasets import DatasetSpec, generate_dataset
from .defense import RecoveryPolicy
from .harness import ExperimentConfig, compare_runs, parse_config, parse_config_dict, run_experiment
from .protocol import AbortedRun, Mode, PipelineConfig, Seeds, run_training, uniform_stage_specs

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackKind",
    "DatasetSpec",
    "generate_dataset",
    "RecoveryPolicy",
    "ExperimentConfig",
    "compare_runs",
    "parse_config",
    "parse_config_dict",
    "run_experiment",
    "AbortedRun",
    "Mode",
    "PipelineConfig",
    "Seeds",
    "run_training",
    "uniform_stage_specs",
]
