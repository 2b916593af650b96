"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .gradcheck import grad_check
from .optim import AdamW
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    reset_tape,
    set_debug,
    set_default_dtype,
)

__all__ = [
    "AdamW",
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "reset_tape",
    "set_debug",
    "set_default_dtype",
]
