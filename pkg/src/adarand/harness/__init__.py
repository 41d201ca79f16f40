"""Experiment runner: data, pretraining, fine-tuning, sweeps and the CLI."""

from adarand.harness.config import ExperimentConfig, load_config
from adarand.harness.data import Dataset, generate_synthetic, load_csv_dataset, save_csv_dataset
from adarand.harness.train import finetune, pretrain, run_finetune

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "finetune",
    "generate_synthetic",
    "load_config",
    "load_csv_dataset",
    "pretrain",
    "run_finetune",
    "save_csv_dataset",
]
