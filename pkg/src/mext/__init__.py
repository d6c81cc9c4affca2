"""Multi-exit transformer encoders with self-distillation, gradient
regularization and entropy-threshold early exiting, on a small numpy
autodiff core."""
from ._kernels import BACKEND
from .errors import CheckpointMismatch, ConfigError, ContractError, DataError, MextError

__all__ = ["BACKEND", "CheckpointMismatch", "ConfigError", "ContractError", "DataError", "MextError"]
__version__ = "0.1.0"
