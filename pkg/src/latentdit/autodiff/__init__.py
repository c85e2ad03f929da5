from . import functional
from .gradcheck import gradcheck, numerical_gradient, relative_error
from .optim import AdamState, NonFiniteGradientError, adamw_step
from .tensor import ShapeError, Tape, Tensor, as_tensor, grad_enabled, no_grad, precision

__all__ = [
    "AdamState",
    "NonFiniteGradientError",
    "ShapeError",
    "Tape",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "functional",
    "grad_enabled",
    "gradcheck",
    "no_grad",
    "numerical_gradient",
    "precision",
    "relative_error",
]
