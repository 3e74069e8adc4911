"""Minimal reverse-mode AD over dense real and complex numpy arrays."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import NondeterministicError, finite_difference_check, numeric_grad
from .tensor import (
    NumericError,
    Record,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    checked,
    current_tape,
    is_checked,
    is_grad_enabled,
    no_grad,
    record,
)

__all__ = [
    "CheckpointError",
    "NondeterministicError",
    "NumericError",
    "Record",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "checked",
    "current_tape",
    "finite_difference_check",
    "is_checked",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "numeric_grad",
    "ops",
    "record",
    "save_checkpoint",
]
