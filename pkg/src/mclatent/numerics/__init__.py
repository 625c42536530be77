"""Dense float64 tensors with reverse-mode gradients, the layer primitives the
model needs, AdamW, a finite-difference checker and the MCLT file format."""

from .gradcheck import GradCheckReport, grad_check
from .layers import LayerParams, attention_block, layer_norm, linear, softmax_rows
from .optim import OptimizerState, adamw_step
from .tensor import Tensor, backward, no_grad, parameter, zero_grad

__all__ = [
    "GradCheckReport",
    "LayerParams",
    "OptimizerState",
    "Tensor",
    "adamw_step",
    "attention_block",
    "backward",
    "grad_check",
    "layer_norm",
    "linear",
    "no_grad",
    "parameter",
    "softmax_rows",
    "zero_grad",
]
