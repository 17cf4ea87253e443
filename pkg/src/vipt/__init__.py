"""Visual prompt tuning for multi-modal tracking on a frozen RGB tracker, at desk scale."""

from .config import (
    FoundationConfig,
    LossWeights,
    PromptConfig,
    TrainSchedule,
    ViPTConfig,
    gradcheck_config,
    paper_config,
    toy_config,
)
from .params import ParamStore
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "FoundationConfig",
    "LossWeights",
    "ParamStore",
    "PromptConfig",
    "Tape",
    "Tensor",
    "TrainSchedule",
    "ViPTConfig",
    "backward",
    "grad_check",
    "gradcheck_config",
    "paper_config",
    "toy_config",
]
