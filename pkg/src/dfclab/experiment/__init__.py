"""Configuration, training loop, checkpoints and the command-line interface."""
from dfclab.experiment.config import ExperimentConfig, load_config, parse_config_text
from dfclab.experiment.training import analyze, init_fixed_feedback, run_training

__all__ = ["ExperimentConfig", "analyze", "init_fixed_feedback", "load_config",
           "parse_config_text", "run_training"]
