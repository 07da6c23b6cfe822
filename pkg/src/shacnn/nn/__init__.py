from . import functional
from .functional import ShapeError
from .optim import NonFiniteGradientError, Optimizer, OptimizerConfig, optimizer_step
from .tensor import GraphError, Parameter, Tensor, backward, zero_grad

__all__ = [
    "functional",
    "ShapeError",
    "NonFiniteGradientError",
    "Optimizer",
    "OptimizerConfig",
    "optimizer_step",
    "GraphError",
    "Parameter",
    "Tensor",
    "backward",
    "zero_grad",
]
