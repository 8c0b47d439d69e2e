from . import autograd as F
from .autograd import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    forward_op,
    no_grad,
)
from .nn import Conv2d, GroupNorm, Linear, Module
from .optim import AdamState, LrSchedule, accumulate_and_maybe_step, adam_step, lr_at_step
from .rng import Rng

__all__ = [
    "F",
    "AdamState",
    "Conv2d",
    "GroupNorm",
    "Linear",
    "LrSchedule",
    "Module",
    "NonFiniteError",
    "Parameter",
    "Rng",
    "ShapeError",
    "Tensor",
    "accumulate_and_maybe_step",
    "adam_step",
    "backward",
    "forward_op",
    "lr_at_step",
    "no_grad",
]
