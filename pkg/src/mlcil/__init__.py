"""Class-incremental multi-label learning on synthetic patch tokens.

The package bundles a small float64 reverse-mode autodiff engine, an
attention-based feature purifier with a stability/plasticity classifier
pair, confidence-distribution pseudo-labeling, unknown-class probing, an
asymmetric multi-label loss, and the session runner that ties them together.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .config import ExperimentConfig, load_config
from .data import (
    DatasetConfig,
    SessionProtocol,
    build_protocol,
    generate_dataset,
    split_train_test,
)
from .errors import MlcilError
from .losses import LossConfig, new_class_weight, wasl_loss
from .metrics import SessionResult, average_precision, calinski_harabasz, f1_scores
from .optim import Adam, AdamState, adam_step
from .probing import sample_simplex_weights, synthesize_unknown
from .purifier import AttentionBlock, PurifierModel
from .recall import (
    ConfidenceDistributionTable,
    confidence_forgetting,
    fit_distributions,
    pseudo_label_re,
)
from .runner import RunOutcome, Runner, run_ablation, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamState",
    "AttentionBlock",
    "ConfidenceDistributionTable",
    "DatasetConfig",
    "ExperimentConfig",
    "LossConfig",
    "MlcilError",
    "PurifierModel",
    "RunOutcome",
    "Runner",
    "SessionProtocol",
    "SessionResult",
    "Tape",
    "Tensor",
    "adam_step",
    "average_precision",
    "backward",
    "build_protocol",
    "calinski_harabasz",
    "confidence_forgetting",
    "f1_scores",
    "fit_distributions",
    "generate_dataset",
    "grad_check",
    "load_config",
    "new_class_weight",
    "pseudo_label_re",
    "run_ablation",
    "run_experiment",
    "sample_simplex_weights",
    "split_train_test",
    "synthesize_unknown",
    "wasl_loss",
    "__version__",
]
