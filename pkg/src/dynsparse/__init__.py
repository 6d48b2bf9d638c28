"""Dynamic spatial sparsification: progressive token pruning for isotropic
transformers and asymmetric fast/slow-path computation for hierarchical
backbones, with analytic FLOPs accounting and a synthetic-data harness."""

from .tensor import MacCounter, NumericsError, ShapeError, Tape, Tensor

__all__ = ["Tensor", "Tape", "MacCounter", "ShapeError", "NumericsError"]
__version__ = "0.1.0"
