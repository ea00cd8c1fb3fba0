"""metaux: dual-branch meta-auxiliary few-shot learning engine.

Built on a from-scratch recorded-graph autodiff core with exact
second-order meta-gradients, evaluated on a synthetic micro/macro
expression video benchmark.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    GraphError,
    MetauxError,
    PoolError,
    ShapeError,
    UnknownKindError,
)
from .graph import ComputationGraph, GradientMap, Tensor, apply_primitive, backward, no_recording
from .gradcheck import CheckReport, grad_check

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CheckReport",
    "ComputationGraph",
    "ConfigError",
    "GradientMap",
    "GraphError",
    "MetauxError",
    "PoolError",
    "ShapeError",
    "Tensor",
    "UnknownKindError",
    "apply_primitive",
    "backward",
    "grad_check",
    "no_recording",
    "__version__",
]
