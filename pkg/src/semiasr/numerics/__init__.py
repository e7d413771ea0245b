from .tensor import (
    NonFiniteError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)
from .optim import Adam, AdamState, adam_step, clip_by_global_norm
from .gradcheck import GradCheckReport, grad_check
from .tensorio import load_tensor, save_tensor

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckReport",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "backward",
    "clip_by_global_norm",
    "default_dtype",
    "get_default_dtype",
    "grad_check",
    "load_tensor",
    "no_grad",
    "save_tensor",
    "set_default_dtype",
]
