"""fdq: a desk-scale lab for value-guided neural sequence decoding.

Everything is numpy. Models are small on purpose: the point is to make
future-outcome decoding inspectable, not fast.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, backward, precision, fd_check
from .optim import OptimState, optimizer_step

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "precision",
    "fd_check",
    "OptimState",
    "optimizer_step",
    "__version__",
]
