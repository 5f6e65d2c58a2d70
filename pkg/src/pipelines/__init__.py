"""Pipeline utilities for orchestrating data preparation, training and evaluation."""

from .data_pipeline import run_data_preparation


def run_training_pipeline(*args, **kwargs):
    from .training_pipeline import run_training_pipeline as _run_training_pipeline

    return _run_training_pipeline(*args, **kwargs)


def run_study(*args, **kwargs):
    from .training_pipeline import run_study as _run_study

    return _run_study(*args, **kwargs)


def run_benchmark(*args, **kwargs):
    from .training_pipeline import run_benchmark as _run_benchmark

    return _run_benchmark(*args, **kwargs)


__all__ = [
    "run_data_preparation",
    "run_training_pipeline",
    "run_study",
    "run_benchmark",
]
