"""Small reverse-mode autodiff engine over numpy arrays."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, rel_error
from .optim import AdamState, NonFiniteGradient, adam_step, cosine_lr
from .tensor import ShapeError, Tape, TapeError, Tensor, active_tape

__all__ = [
    "AdamState",
    "CheckpointError",
    "NonFiniteGradient",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "check_gradients",
    "adam_step",
    "cosine_lr",
    "load_checkpoint",
    "numeric_grad",
    "ops",
    "rel_error",
    "save_checkpoint",
]
