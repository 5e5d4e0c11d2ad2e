"""Machine unlearning for SGD-trained linear models from a short step history."""

from .errors import UnlearnError
from .objective import Dataset, LossConfig
from .trainer import TrainConfig, TrainingLog, init_training, retrain_oracle
from .unlearner import UnlearnResult, UnlearnSet, delta_w_horner, delta_w_parallel, unlearn

__all__ = [
    "Dataset",
    "LossConfig",
    "TrainConfig",
    "TrainingLog",
    "UnlearnError",
    "UnlearnResult",
    "UnlearnSet",
    "delta_w_horner",
    "delta_w_parallel",
    "init_training",
    "retrain_oracle",
    "unlearn",
]
