"""Class-incremental learning with teacher-student distillation and structured pruning."""

from .metrics import (
    AccuracyMatrix,
    ClassSet,
    TaskDescriptor,
    compute_acc,
    compute_bwt,
    record_accuracy,
    taskwise_forgetting,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "ClassSet",
    "TaskDescriptor",
    "compute_acc",
    "compute_bwt",
    "record_accuracy",
    "taskwise_forgetting",
]
