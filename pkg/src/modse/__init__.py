"""Desk-scale mixture-of-diverse-size-experts laboratory."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: E402,F401
from .model import ModelConfig  # noqa: E402,F401
from .optim import OptimizerConfig  # noqa: E402,F401
from .moe import PairedExpertSpec, build_paired_spec, homogeneous_spec  # noqa: E402,F401
