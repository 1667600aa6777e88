"""Multi-granularity patching transformer for medical time-series classification.

Everything runs on numpy through the small reverse-mode autodiff engine in
:mod:`medformer.tensor`.
"""

from .data import Dataset, SampleRecord, SplitPlan, load_dataset, save_dataset, split, synth_generate
from .errors import (ConfigError, FormatError, MedformerError, ResourceLimitError, ShapeError,
                     TrainingDiverged)
from .metrics import MetricsReport, compute_metrics
from .model import Medformer, ModelConfig, build_variant, count_parameters, load_model, save_params
from .tensor import Tensor, no_grad
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Dataset", "FormatError", "Medformer", "MedformerError", "MetricsReport",
    "ModelConfig", "ResourceLimitError", "SampleRecord", "ShapeError", "SplitPlan", "Tensor",
    "TrainConfig", "TrainingDiverged", "build_variant", "compute_metrics", "count_parameters",
    "evaluate", "load_dataset", "load_model", "no_grad", "save_dataset", "save_params", "split",
    "synth_generate", "train",
]
