"""Desk-scale laboratory for cross-domain few-shot classification.

Pre-train small branch networks with a spectral penalty on batch feature
matrices, transform features through fixed random orthogonal projections,
fine-tune per episode on the target domain (optionally transductively and
on augmented supports), refine query scores by label propagation, and
average branch predictions.
"""

from ._backend import BACKEND
from .config import ExperimentConfig, load_config
from .episodes import Dataset, Episode, EvalReport
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateGraphError,
    FTError,
    NumericalError,
    ProtocolError,
)
from .pipeline import evaluate_model, finetune, pretrain, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "__version__",
    "ExperimentConfig",
    "load_config",
    "Dataset",
    "Episode",
    "EvalReport",
    "FTError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateGraphError",
    "NumericalError",
    "ProtocolError",
    "pretrain",
    "finetune",
    "evaluate_model",
    "run_experiment",
]
