"""From-scratch numpy implementation of the MultiNet-ViT hybrid classifier."""

from .metrics import CLASS_NAMES
from .multinet import PAIRINGS, ModelSpec, build_model
from .tensor import Tensor, default_dtype, no_grad

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "PAIRINGS", "ModelSpec", "build_model", "Tensor", "default_dtype", "no_grad"]
