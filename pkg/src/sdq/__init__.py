"""Self-distilled quantization toolkit for a toy transformer encoder.

Pure-numpy reverse-mode autodiff, affine fake/real quantization with a
straight-through estimator, block quantization noise, iterative product
quantization with k-means/EM codebooks, distillation losses, and a small
training/analysis harness around them.
"""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
