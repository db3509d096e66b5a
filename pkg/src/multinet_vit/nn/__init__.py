from . import functional
from .functional import (
    adaptive_avg_pool2d,
    conv2d,
    dropout,
    gelu,
    global_avg_pool2d,
    layer_norm,
    log_softmax,
    maxpool2d,
    relu,
    softmax,
)
from .layers import (
    GELU,
    Conv2d,
    Dropout,
    Flatten,
    LayerNorm,
    Linear,
    MaxPool2d,
    Module,
    Parameter,
    ReLU,
    Sequential,
    kaiming_uniform,
)

__all__ = [
    "functional", "adaptive_avg_pool2d", "conv2d", "dropout", "gelu", "global_avg_pool2d", "layer_norm",
    "log_softmax", "maxpool2d", "relu", "softmax", "GELU", "Conv2d", "Dropout", "Flatten", "LayerNorm",
    "Linear", "MaxPool2d", "Module", "Parameter", "ReLU", "Sequential", "kaiming_uniform",
]
