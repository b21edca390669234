"""Minimal differentiable tensor engine for the detection network.

Submodules:

- :mod:`.tensor` — Tensor/Parameter types and the op set with reverse-mode
  gradients;
- :mod:`.layers` — Conv2d, BatchNorm2d, BiGRU;
- :mod:`.optim` — bias-corrected Adam;
- :mod:`.checkpoint` — versioned float32 weight files;
- :mod:`.gradcheck` — finite-difference verification helper.
"""

from .checkpoint import (
    Checkpoint,
    CheckpointEntry,
    CheckpointFormatError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import max_relative_error
from .layers import BatchNorm2d, BiGRU, Conv2d, uniform_init
from .optim import Adam, OptimizerConfig, adam_step
from .tensor import (
    Parameter,
    ShapeError,
    StateError,
    Tensor,
    UsageError,
)
from . import tensor as ops

__all__ = [
    "Adam",
    "BatchNorm2d",
    "BiGRU",
    "Checkpoint",
    "CheckpointEntry",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "Conv2d",
    "OptimizerConfig",
    "Parameter",
    "ShapeError",
    "StateError",
    "Tensor",
    "UsageError",
    "adam_step",
    "load_checkpoint",
    "max_relative_error",
    "ops",
    "save_checkpoint",
    "uniform_init",
]
