"""Configuration, synthetic data, training, inference and probes."""

from .config import ExperimentConfig, builtin_configs, config_from_dict, dumps_config, load_config
from .data import Dataset, gen_data
from .infer import infer_tracks, load_trained
from .probe import probe_receptive_field
from .train import TrainingError, TrainResult, build_model, train

__all__ = [
    "Dataset", "ExperimentConfig", "TrainResult", "TrainingError", "build_model", "builtin_configs",
    "config_from_dict", "dumps_config", "gen_data", "infer_tracks", "load_config", "load_trained",
    "probe_receptive_field", "train",
]
