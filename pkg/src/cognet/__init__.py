"""Medication-set recommendation with a copy-or-generate transformer decoder."""
from cognet.data import (
    DatasetBundle,
    PatientRecord,
    Visit,
    generate_synthetic_cohort,
    load_bundle,
    order_medications,
    save_bundle,
    split_dataset,
)
from cognet.layers import ModelConfig
from cognet.model import COGNet
from cognet.training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "COGNet", "DatasetBundle", "ModelConfig", "PatientRecord", "TrainConfig", "Visit",
    "generate_synthetic_cohort", "load_bundle", "load_checkpoint", "order_medications",
    "save_bundle", "save_checkpoint", "split_dataset", "train",
]
