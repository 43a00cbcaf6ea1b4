"""Residual adapters for frozen conformer encoders.

A small reverse-mode autodiff engine over numpy, a conformer encoder built on
it, four adapter placements (serial, parallel at FFN1, two parallel adapters at
both FFNs, parallel at the convolution module), a finetuning harness that
freezes the encoder, activation statistics with neuron pruning, and a binary
archive format for encoders and per-task adapter packs.
"""

from .adapters import AdapterSet, AdapterSpec, ParamCount, Placement, count_adapter_params
from .autodiff import Tensor, grad_check, no_grad
from .conformer import ConformerConfig, encoder_forward, init_encoder
from .errors import (
    CompatibilityError,
    ConfigError,
    DegenerateAdapterError,
    DimensionError,
    FormatError,
    IntegrityError,
    NumericError,
    PreconditionError,
    ResAdaptError,
)
from .finetune import Mode, Model, ProtocolConfig, SyntheticTask, TrainConfig
from .sites import InsertionSite, Site

__all__ = [
    "AdapterSet", "AdapterSpec", "ParamCount", "Placement", "count_adapter_params",
    "Tensor", "grad_check", "no_grad",
    "ConformerConfig", "encoder_forward", "init_encoder",
    "CompatibilityError", "ConfigError", "DegenerateAdapterError", "DimensionError", "FormatError",
    "IntegrityError", "NumericError", "PreconditionError", "ResAdaptError",
    "Mode", "Model", "ProtocolConfig", "SyntheticTask", "TrainConfig",
    "InsertionSite", "Site",
]
__version__ = "0.1.0"
