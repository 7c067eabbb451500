"""Spiking-student knowledge distillation with saliency-map and noise-smoothed logits alignment."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
