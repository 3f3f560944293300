"""Minimal numpy layer library with hand-written backward passes."""
from magtac.nn.gradcheck import GradCheckReport, grad_check, numeric_grad, relative_error
from magtac.nn.layers import (
    BatchNorm2d,
    Conv2d,
    ConvSpec,
    Flatten,
    Linear,
    Module,
    Parameter,
    ReLU,
    Sequential,
    ShapeError,
    conv_bn_relu,
)
from magtac.nn.loss import smooth_l1_loss
from magtac.nn.optim import Adam, adam_step
from magtac.nn.recurrent import GRU, GRULayer, GruSpec, sigmoid

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "ConvSpec",
    "Flatten",
    "GRU",
    "GRULayer",
    "GradCheckReport",
    "GruSpec",
    "Linear",
    "Module",
    "Parameter",
    "ReLU",
    "Sequential",
    "ShapeError",
    "adam_step",
    "conv_bn_relu",
    "grad_check",
    "numeric_grad",
    "relative_error",
    "sigmoid",
    "smooth_l1_loss",
]
