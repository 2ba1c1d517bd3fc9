"""Toolkit for discovering and correcting input-dependent miscalibration.

Works on triples (embedding, confidence, outcome): learns a representation
in which kernel-averaged residuals expose coherent over- and underconfident
regions, then audits them and applies a range-aware local correction.
"""

__version__ = "0.1.0"

from calibfield.dataio import (
    Dataset,
    NeighbourBank,
    SplitSpec,
    load_triples,
    sample_bank,
    save_triples,
    split,
)
from calibfield.field import (
    FieldEstimate,
    KernelConfig,
    LossConfig,
    TrainConfig,
    estimate_field,
    train,
)

__all__ = [
    "Dataset",
    "NeighbourBank",
    "SplitSpec",
    "load_triples",
    "sample_bank",
    "save_triples",
    "split",
    "FieldEstimate",
    "KernelConfig",
    "LossConfig",
    "TrainConfig",
    "estimate_field",
    "train",
    "__version__",
]
