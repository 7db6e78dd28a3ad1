"""Pyramid-pooling axial transformer for real-time semantic segmentation, on numpy."""

from .tensor import Parameter, Tensor, backward, no_grad, precision
from .model import ModelConfig, P2AT, build, count_flops, count_params

__all__ = [
    "ModelConfig",
    "P2AT",
    "Parameter",
    "Tensor",
    "backward",
    "build",
    "count_flops",
    "count_params",
    "no_grad",
    "precision",
]
