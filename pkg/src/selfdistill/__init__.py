"""Label-free self-distillation for small vision transformers.

Stage 1 pretrains a patch transformer on unlabeled images by matching a
gradient-free EMA teacher's temperature-softened outputs on global crops
against a student fed local crops. Stage 2 evaluates the learned features
with a linear probe, a metric suite, ablation sweeps, t-SNE projections,
and attention-map exports.
"""

from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    ShapeError,
    UnsupportedFormatError,
)
from .tensor import Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DomainError",
    "FormatError",
    "ShapeError",
    "UnsupportedFormatError",
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
    "__version__",
]
