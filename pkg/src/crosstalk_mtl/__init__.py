"""Single-task, shared-trunk and cross-talk multi-task classifiers for fault diagnosis.

The package is numpy-only: a small reverse-mode autodiff engine, spectrogram
CNN layers, seven multi-task architectures, synthetic drone and motor
benchmarks, a training protocol and imbalance-aware metrics.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .errors import CrosstalkError
from .experiment import TrainConfig, sweep, train_cell, train_one
from .metrics import RunReport, aggregate_compound, macro_f1, rank_table
from .models import KINDS, BackboneSpec, TaskSpec, build_model, default_backbone

__version__ = "0.1.0"

__all__ = [
    "KINDS",
    "BackboneSpec",
    "CrosstalkError",
    "RunReport",
    "Tape",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "aggregate_compound",
    "backward",
    "build_model",
    "default_backbone",
    "grad_check",
    "macro_f1",
    "rank_table",
    "sweep",
    "train_cell",
    "train_one",
]
