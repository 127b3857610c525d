from . import ops
from .autodiff import Gradients, NonFiniteError, Tape, Tensor, backward
from .optim import AdamState, adam_step
from .rng import Rng64

__all__ = [
    "AdamState",
    "Gradients",
    "NonFiniteError",
    "Rng64",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "ops",
]
