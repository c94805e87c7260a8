"""Experiment harness: configuration, training, experiments, reports and the CLI."""
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .train import RunRecord, TrainingError, load_splits, pretrain_streams, train_model

__all__ = ["ConfigError", "ExperimentConfig", "RunRecord", "TrainingError", "config_from_dict", "load_config",
           "load_splits", "pretrain_streams", "train_model"]
