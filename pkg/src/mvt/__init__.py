"""Transformer classifier over several rendered views of one 3D object."""

from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .model import (
    MVTConfig, MVTModel, PRESETS, attention_flops, forward, load_checkpoint, param_count,
    preset, save_checkpoint,
)
from .tensor import ParamStore, Tape, Tensor, backward, finite_diff_check
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
